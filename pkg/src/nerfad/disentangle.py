"""AU-guided attention disentanglement of a face crop.

Four small conv nets work at crop resolution: a mask generator and a warping
generator sharing one encoder, an AU classifier and a Wasserstein critic.  The
generated image blends the crop and the warp, ``I_G = A*I_crop + (1-A)*I_W``, so
pixels the mask keeps (``A`` near 1) carry identity and the speech-related region
is where ``A`` is low.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Conv2d, Linear, Module, Tensor


class DisentangleError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    crop: int = 32
    n_au: int = 8
    channels: int = 16

    def __post_init__(self):
        if self.crop % 8:
            raise DisentangleError("crop size must be a multiple of 8")


def _check_image(x: Tensor, cfg: NetConfig, channels: int = 3) -> None:
    if x.ndim != 4 or x.shape[1:] != (channels, cfg.crop, cfg.crop):
        raise DisentangleError(
            f"expected images of shape (B,{channels},{cfg.crop},{cfg.crop}), got {x.shape}"
        )


def to_nhwc(x) -> Tensor:
    return ad.transpose(ad.as_tensor(x), (0, 2, 3, 1))


def to_nchw(x) -> Tensor:
    return ad.transpose(x, (0, 3, 1, 2))


def au_planes(x: Tensor, au) -> Tensor:
    """Append each AU value as a constant plane to channels-last image features."""
    au = ad.as_tensor(au)
    b, h, w, _ = x.shape
    if au.ndim == 1:
        au = ad.broadcast_to(ad.reshape(au, (1, -1)), (b, au.shape[0]))
    if au.shape[0] != b:
        raise DisentangleError(f"AU batch {au.shape[0]} != image batch {b}")
    planes = ad.broadcast_to(ad.reshape(au, (b, 1, 1, au.shape[1])), (b, h, w, au.shape[1]))
    return ad.concat([x, planes], axis=3)


class _Decoder(Module):
    def __init__(self, ch: int, skip_in: int, out_ch: int, rng):
        super().__init__()
        self.up1 = Conv2d(2 * ch + ch, ch, 3, rng)
        self.up2 = Conv2d(ch + skip_in, out_ch, 3, rng, gain=1.0)

    def forward(self, e1, e2, x_in):
        h = ad.relu(self.up1(ad.concat([ad.upsample2(e2), e1], axis=3)))
        return self.up2(ad.concat([ad.upsample2(h), x_in], axis=3))


class AttentionGenerator(Module):
    """Shared encoder with a mask head (G_M) and a warp head (G_W)."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator, mask_bias: float = 0.0):
        super().__init__()
        self.cfg = cfg
        ch, cin = cfg.channels, 3 + cfg.n_au
        self.enc1 = Conv2d(cin, ch, 4, rng, stride=2)
        self.enc2 = Conv2d(ch, 2 * ch, 4, rng, stride=2)
        self.mid = Conv2d(2 * ch, 2 * ch, 3, rng)
        self.mask_head = _Decoder(ch, cin, 1, rng)
        self.warp_head = _Decoder(ch, cin, 3, rng)
        self.mask_head.up2.bias.data[:] = mask_bias

    def encode(self, image, au):
        image = ad.as_tensor(image)
        _check_image(image, self.cfg)
        au = ad.as_tensor(au)
        if au.shape[-1] != self.cfg.n_au:
            raise DisentangleError(f"AU code length {au.shape[-1]} != n_AU {self.cfg.n_au}")
        x = au_planes(to_nhwc(image), au)
        e1 = ad.relu(self.enc1(x))
        e2 = ad.relu(self.enc2(e1))
        e2 = ad.relu(self.mid(e2)) + e2
        return x, e1, e2

    def forward(self, image, au) -> tuple[Tensor, Tensor]:
        x, e1, e2 = self.encode(image, au)
        mask = ad.sigmoid(self.mask_head(e1, e2, x))
        warp = ad.sigmoid(self.warp_head(e1, e2, x))
        return to_nchw(mask), to_nchw(warp)

    def mask(self, image, au) -> Tensor:
        x, e1, e2 = self.encode(image, au)
        return to_nchw(ad.sigmoid(self.mask_head(e1, e2, x)))


class ConvEncoder(Module):
    """Three stride-2 convs then a linear map; used by C, W_D and the fusion encoders."""

    def __init__(self, crop: int, in_ch: int, ch: int, out_dim: int, rng, act: str = "leaky"):
        super().__init__()
        self.crop, self.in_ch, self.act = crop, in_ch, act
        self.c1 = Conv2d(in_ch, ch, 4, rng, stride=2)
        self.c2 = Conv2d(ch, 2 * ch, 4, rng, stride=2)
        self.c3 = Conv2d(2 * ch, 4 * ch, 4, rng, stride=2)
        self.flat = 4 * ch * (crop // 8) ** 2
        self.fc = Linear(self.flat, out_dim, rng, gain=1.0)

    def _act(self, x):
        return ad.leaky_relu(x, 0.2) if self.act == "leaky" else ad.relu(x)

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != (self.in_ch, self.crop, self.crop):
            raise DisentangleError(
                f"expected images of shape (B,{self.in_ch},{self.crop},{self.crop}), got {x.shape}"
            )
        h = self._act(self.c1(to_nhwc(x)))
        h = self._act(self.c2(h))
        h = self._act(self.c3(h))
        return self.fc(ad.reshape(h, (x.shape[0], self.flat)))


class AUClassifier(ConvEncoder):
    def __init__(self, cfg: NetConfig, rng):
        super().__init__(cfg.crop, 3, cfg.channels, cfg.n_au, rng)

    def forward(self, x) -> Tensor:
        return ad.sigmoid(super().forward(x))


class Critic(ConvEncoder):
    def __init__(self, cfg: NetConfig, rng):
        super().__init__(cfg.crop, 3, cfg.channels, 1, rng)

    def forward(self, x) -> Tensor:
        return ad.reshape(super().forward(x), (ad.as_tensor(x).shape[0],))


class DisentangleNets(Module):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator, mask_bias: float = 0.0):
        super().__init__()
        self.cfg = cfg
        self.generator = AttentionGenerator(cfg, rng, mask_bias)
        self.classifier = AUClassifier(cfg, rng)
        self.critic = Critic(cfg, rng)


# ---- operations --------------------------------------------------------------

def mask_generate(nets: DisentangleNets, crop, au) -> Tensor:
    """Attention mask (B,1,H,W) in [0,1]."""
    return nets.generator.mask(crop, au)


def warp_generate(nets: DisentangleNets, crop, au_target) -> Tensor:
    return nets.generator(crop, au_target)[1]


def composite(mask, crop, warp) -> Tensor:
    """``A*I_crop + (1-A)*I_W``; a one-channel mask broadcasts over colour."""
    mask, crop, warp = ad.as_tensor(mask), ad.as_tensor(crop), ad.as_tensor(warp)
    if crop.shape != warp.shape or mask.shape[-2:] != crop.shape[-2:]:
        raise DisentangleError(f"resolution mismatch: {mask.shape}, {crop.shape}, {warp.shape}")
    return mask * crop + (1.0 - mask) * warp


def au_classify(nets: DisentangleNets, image) -> Tensor:
    return nets.classifier(image)


def critic(nets: DisentangleNets, image) -> Tensor:
    return nets.critic(image)


def _sq_dist(a, b) -> Tensor:
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise DisentangleError(f"AU length mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return ad.tsum(d * d, axis=-1)


def speech_code_loss(f_au_g, f_au_t, f_au_c, f_au_o) -> Tensor:
    """Squared AU errors of the generated and the real image (batch mean)."""
    return ad.mean(_sq_dist(f_au_g, f_au_t) + _sq_dist(f_au_c, f_au_o))


def l1_mean(a, b) -> Tensor:
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise DisentangleError(f"shape mismatch: {a.shape} vs {b.shape}")
    return ad.mean(ad.tabs(a - b))


def cycle_identity_loss(nets: DisentangleNets, generated, f_au_o, crop) -> Tensor:
    """Regenerate the original from ``I_G`` under the original AUs; mean L1 to the crop."""
    mask_g, warp_g = nets.generator(generated, f_au_o)
    return l1_mean(composite(mask_g, generated, warp_g), crop)


def wgan_gp_loss(nets: DisentangleNets, generated, real, lam: float, rng: np.random.Generator):
    """(critic loss, generator adversarial term).

    Penalty points interpolate each real/generated pair with u ~ U(0,1).
    """
    generated, real = ad.as_tensor(generated), ad.as_tensor(real)
    if generated.shape[0] == 0 or real.shape[0] == 0:
        raise DisentangleError("WGAN-GP needs nonempty batches")
    if lam < 0:
        raise DisentangleError("gradient-penalty weight must be nonnegative")
    score_fake = nets.critic(generated)
    score_real = nets.critic(real)
    critic_loss = ad.mean(score_fake) - ad.mean(score_real)
    if lam > 0:
        u = rng.random((real.shape[0], 1, 1, 1))
        interp = Tensor(u * real.data + (1.0 - u) * generated.data, requires_grad=True)
        critic_loss = critic_loss + ad.gradient_penalty(nets.critic, interp, lam)
    return critic_loss, -ad.mean(score_fake)


@dataclass
class FacePair:
    audio_face: np.ndarray  # (3, h, w)
    identity_face: np.ndarray  # (3, H, W) full frame


def split_faces(mask, crop, identity_frame, crop_rect) -> FacePair:
    """Audio-face ``(1-A)*I_crop``; Identity-face is the frame with ``A*I_crop`` pasted in.

    ``identity_frame`` is channel-first (3, H, W); ``mask`` may be (1,h,w) or (h,w).
    """
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    crop = np.asarray(crop, dtype=np.float64)
    frame = np.asarray(identity_frame, dtype=np.float64)
    if mask.ndim == 2:
        mask = mask[None]
    x0, y0, w, h = (int(v) for v in crop_rect)
    if x0 < 0 or y0 < 0 or y0 + h > frame.shape[1] or x0 + w > frame.shape[2]:
        raise DisentangleError(f"crop rect {crop_rect} outside frame {frame.shape[1:]}")
    if crop.shape != (3, h, w) or mask.shape[-2:] != (h, w):
        raise DisentangleError("mask/crop resolution does not match the crop rect")
    audio = (1.0 - mask) * crop
    ident = frame.copy()
    ident[:, y0 : y0 + h, x0 : x0 + w] = mask * crop
    return FacePair(audio_face=audio, identity_face=ident)


def sample_targets(au: np.ndarray, n_driving: int, rng: np.random.Generator) -> np.ndarray:
    """Random target codes: speech-related AUs redrawn, the rest kept."""
    target = np.array(au, dtype=np.float64, copy=True)
    target[:, :n_driving] = rng.random((target.shape[0], n_driving))
    return target


# ---- training ------------------------------------------------------------------

@dataclass
class DisentangleTrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    n_critic: int = 5
    gp_lambda: float = 10.0
    w_adv: float = 1.0
    w_au: float = 200.0
    w_cycle: float = 10.0
    w_mask: float = 0.1
    mask_bias: float = 2.0
    channels: int = 8


class DisentangleTrainer:
    """One iteration = ``n_critic`` critic/classifier updates + one generator update."""

    LOSS_TERMS = ("critic", "gp", "classifier", "adversarial", "speech_code", "cycle", "mask_reg")

    def __init__(self, crops: np.ndarray, au: np.ndarray, n_driving: int,
                 cfg: DisentangleTrainConfig, rng: np.random.Generator):
        if len(crops) == 0:
            raise DisentangleError("no training crops")
        self.crops = crops
        self.au = au
        self.n_driving = n_driving
        self.cfg = cfg
        net_cfg = NetConfig(crop=crops.shape[-1], n_au=au.shape[1], channels=cfg.channels)
        self.nets = self.model = DisentangleNets(net_cfg, rng, cfg.mask_bias)
        betas = (cfg.beta1, cfg.beta2)
        self.optimizers = {
            "generator": Adam(self.nets.generator, cfg.lr, betas),
            "classifier": Adam(self.nets.classifier, cfg.lr, betas),
            "critic": Adam(self.nets.critic, cfg.lr, betas),
        }

    def _batch(self, rng):
        idx = rng.integers(0, len(self.crops), self.cfg.batch_size)
        return self.crops[idx], self.au[idx]

    def step(self, rng: np.random.Generator) -> dict[str, float]:
        cfg, nets = self.cfg, self.nets
        log = {}
        for _ in range(cfg.n_critic):
            real, f_o = self._batch(rng)
            f_t = sample_targets(f_o, self.n_driving, rng)
            with ad.no_grad():
                mask, warp = nets.generator(real, f_t)
                fake = composite(mask, real, warp)
            real_t = Tensor(real)
            score_fake = nets.critic(fake)
            score_real = nets.critic(real_t)
            w_dist = ad.mean(score_fake) - ad.mean(score_real)
            u = rng.random((real.shape[0], 1, 1, 1))
            interp = Tensor(u * real + (1.0 - u) * fake.data, requires_grad=True)
            gp = ad.gradient_penalty(nets.critic, interp, cfg.gp_lambda)
            critic_loss = w_dist + gp
            self.optimizers["critic"].step(ad.module_grads(nets.critic, critic_loss))

            cls_loss = ad.mean(_sq_dist(nets.classifier(real_t), f_o))
            self.optimizers["classifier"].step(ad.module_grads(nets.classifier, cls_loss))
            log.update(critic=critic_loss.item(), gp=gp.item(), classifier=cls_loss.item())

        real, f_o = self._batch(rng)
        f_t = sample_targets(f_o, self.n_driving, rng)
        mask, warp = nets.generator(real, f_t)
        fake = composite(mask, real, warp)
        adv = -ad.mean(nets.critic(fake))
        speech = ad.mean(_sq_dist(nets.classifier(fake), f_t))
        cyc = cycle_identity_loss(nets, fake, f_o, real)
        mask_reg = ad.mean(1.0 - mask)
        g_loss = cfg.w_adv * adv + cfg.w_au * speech + cfg.w_cycle * cyc + cfg.w_mask * mask_reg
        self.optimizers["generator"].step(ad.module_grads(nets.generator, g_loss))
        log.update(adversarial=adv.item(), speech_code=speech.item(), cycle=cyc.item(),
                   mask_reg=mask_reg.item())
        return {k: log[k] for k in self.LOSS_TERMS}
