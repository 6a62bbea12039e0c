"""Audio-face encoding, audio fusion and identity features.

E_a encodes an Audio-face, D decodes it together with an audio feature into a
fused Audio-face image, E_f re-encodes that image, and E_id maps an
Identity-face to the identity feature.  D_f and D_id are auxiliary decoders
that give E_f and E_id reconstruction objectives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Conv2d, Linear, Module, Tensor
from .disentangle import ConvEncoder, DisentangleNets, AttentionGenerator, l1_mean, split_faces, to_nchw

FEATURE_DIM = 32
DICE_EPS = 1e-6


class FusionError(ValueError):
    pass


class Encoder(ConvEncoder):
    """Conv encoder with a tanh feature output."""

    def __init__(self, size: int, ch: int, rng, dim: int = FEATURE_DIM):
        super().__init__(size, 3, ch, dim, rng, act="relu")

    def forward(self, x) -> Tensor:
        return ad.tanh(super().forward(x))


class Decoder(Module):
    """Feature vector -> (B,3,size,size) image in [0,1]."""

    def __init__(self, n_in: int, size: int, ch: int, rng):
        super().__init__()
        if size % 4:
            raise FusionError("decoder size must be a multiple of 4")
        self.n_in, self.size, self.ch = n_in, size, ch
        self.fc = Linear(n_in, (size // 4) ** 2 * 2 * ch, rng)
        self.c1 = Conv2d(2 * ch, ch, 3, rng)
        self.c2 = Conv2d(ch, 3, 3, rng, gain=1.0)

    def forward(self, z) -> Tensor:
        z = ad.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.n_in:
            raise FusionError(f"decoder expects (B,{self.n_in}) input, got {z.shape}")
        q = self.size // 4
        h = ad.relu(ad.reshape(self.fc(z), (z.shape[0], q, q, 2 * self.ch)))
        h = ad.relu(self.c1(ad.upsample2(h)))
        return to_nchw(ad.sigmoid(self.c2(ad.upsample2(h))))


@dataclass(frozen=True)
class FusionConfig:
    crop: int = 32
    frame: int = 32
    audio_dim: int = 16
    channels: int = 8


class FusionNets(Module):
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.e_a = Encoder(cfg.crop, cfg.channels, rng)
        self.decoder = Decoder(FEATURE_DIM + cfg.audio_dim, cfg.crop, cfg.channels, rng)
        self.e_f = Encoder(cfg.crop, cfg.channels, rng)
        self.e_id = Encoder(cfg.frame, cfg.channels, rng)
        self.d_id = Decoder(FEATURE_DIM, cfg.frame, cfg.channels, rng)
        self.d_f = Decoder(FEATURE_DIM, cfg.crop, cfg.channels, rng)


def _batch(x, what: str, shape: tuple) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim == len(shape) - 1:
        x = ad.reshape(x, (1,) + x.shape)
    if x.shape[1:] != shape[1:]:
        raise FusionError(f"{what}: expected shape (B,{','.join(map(str, shape[1:]))}), got {x.shape}")
    return x


def encode_audio_face(nets: FusionNets, audio_face) -> Tensor:
    c = nets.cfg.crop
    return nets.e_a(_batch(audio_face, "audio face", (0, 3, c, c)))


def fuse_decode(nets: FusionNets, f_aud_face, f_a) -> Tensor:
    f_aud_face = _batch(f_aud_face, "audio-face feature", (0, FEATURE_DIM))
    f_a = _batch(f_a, "audio feature", (0, nets.cfg.audio_dim))
    if f_a.shape[0] != f_aud_face.shape[0]:
        raise FusionError("feature batch sizes differ")
    return nets.decoder(ad.concat([f_aud_face, f_a], axis=1))


def feature_encode(nets: FusionNets, fused) -> Tensor:
    c = nets.cfg.crop
    return nets.e_f(_batch(fused, "fused audio face", (0, 3, c, c)))


def identity_feature(nets: FusionNets, identity_face) -> Tensor:
    f = nets.cfg.frame
    return nets.e_id(_batch(identity_face, "identity face", (0, 3, f, f)))


# ---- losses --------------------------------------------------------------------

@dataclass(frozen=True)
class AUWeights:
    w: np.ndarray
    r: np.ndarray


def au_weights(r) -> AUWeights:
    """Inverse-frequency weights normalised so they sum to n_AU."""
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise FusionError("occurrence vector must be a nonempty 1-D array")
    if np.any(r <= 0) or np.any(r > 1):
        raise FusionError("occurrence probabilities must lie in (0, 1]")
    inv = 1.0 / r
    return AUWeights(w=r.size * inv / inv.sum(), r=r)


def _au_args(x_hat, x, w):
    x_hat = ad.as_tensor(x_hat)
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w.w if isinstance(w, AUWeights) else w, dtype=np.float64)
    if x_hat.shape != x.shape or x.shape[-1] != w.shape[-1]:
        raise FusionError(f"AU length mismatch: {x_hat.shape}, {x.shape}, {w.shape}")
    if np.any(x_hat.data < 0) or np.any(x_hat.data > 1):
        raise FusionError("AU predictions must lie in [0, 1]")
    if np.any((x != 0) & (x != 1)):
        raise FusionError("AU targets must be binary")
    return x_hat, x, w


def bce_loss(x_hat, x, w) -> Tensor:
    x_hat, x, w = _au_args(x_hat, x, w)
    n = x.shape[-1]
    ll = Tensor(x) * ad.log(x_hat) + Tensor(1.0 - x) * ad.log(1.0 - x_hat)
    per = -ad.tsum(ll * Tensor(w), axis=-1) / n
    return ad.mean(per)


def dice_loss(x_hat, x, w, eps: float = DICE_EPS) -> Tensor:
    x_hat, x, w = _au_args(x_hat, x, w)
    n = x.shape[-1]
    xt = Tensor(x)
    frac = (2.0 * xt * x_hat + eps) / (xt * xt + x_hat * x_hat + eps)
    per = ad.tsum((1.0 - frac) * Tensor(w), axis=-1) / n
    return ad.mean(per)


def au_loss(x_hat, x, w, eps: float = DICE_EPS) -> Tensor:
    """Weighted BCE plus weighted Dice; batch rows are averaged."""
    return bce_loss(x_hat, x, w) + dice_loss(x_hat, x, w, eps)


def reconstruction_loss(pred, target) -> Tensor:
    return l1_mean(pred, target)


def _generator(dnets) -> AttentionGenerator:
    if dnets is None:
        raise FusionError("fusion target needs the trained mask generator (run the disentangle stage)")
    return dnets.generator if isinstance(dnets, DisentangleNets) else dnets


def fusion_target(crop, dnets, au) -> np.ndarray:
    """Target-frame Audio-face ``(1 - A_t) * crop(F_t)`` with A_t from the frozen mask generator."""
    gen = _generator(dnets)
    crop = np.asarray(crop, dtype=np.float64)
    single = crop.ndim == 3
    crop_b = crop[None] if single else crop
    au_b = np.atleast_2d(np.asarray(au, dtype=np.float64))
    with ad.no_grad():
        mask = gen.mask(crop_b, au_b).data
    out = (1.0 - mask) * crop_b
    return out[0] if single else out


# ---- preprocessing ---------------------------------------------------------------

@dataclass
class FaceSplits:
    """Per-frame products of the frozen disentangle stage."""

    crops: np.ndarray  # (N,3,h,w)
    masks: np.ndarray  # (N,1,h,w)
    audio_faces: np.ndarray  # (N,3,h,w)
    identity_faces: np.ndarray  # (N,3,H,W)
    frames: np.ndarray  # (N,3,H,W)


def face_splits(dnets, dataset, chunk: int = 16) -> FaceSplits:
    gen = _generator(dnets)
    crops = dataset.crops()
    frames = np.ascontiguousarray(dataset.images.transpose(0, 3, 1, 2))
    masks = np.empty((len(crops), 1) + crops.shape[2:])
    with ad.no_grad():
        for s in range(0, len(crops), chunk):
            masks[s : s + chunk] = gen.mask(crops[s : s + chunk], dataset.au[s : s + chunk]).data
    audio, ident = [], []
    for i in range(len(crops)):
        pair = split_faces(masks[i], crops[i], frames[i], dataset.crop_rects[i])
        audio.append(pair.audio_face)
        ident.append(pair.identity_face)
    return FaceSplits(crops=crops, masks=masks,
                      audio_faces=np.array(audio).reshape((-1,) + crops.shape[1:]),
                      identity_faces=np.array(ident).reshape((-1,) + frames.shape[1:]),
                      frames=frames)


# ---- training ---------------------------------------------------------------------

@dataclass
class FusionTrainConfig:
    batch_size: int = 8
    lr: float = 5e-4
    w_rec: float = 1.0
    w_au: float = 0.1
    w_feat: float = 1.0
    w_id: float = 1.0
    use_au_loss: bool = True
    disentangle: bool = True
    channels: int = 8


class FusionTrainer:
    """Trains E_a, D, E_f, E_id (and D_f, D_id) against a frozen disentangle stage.

    A sample pairs a source Audio-face (a random training frame of the same
    identity) with the audio feature of a target frame; D must produce the
    target frame's Audio-face.  The AU term scores the target crop rebuilt from
    its kept part and the generated Audio-face with the frozen classifier C.
    """

    def __init__(self, dnets: DisentangleNets, splits: FaceSplits, au: np.ndarray, audio: np.ndarray,
                 identity: np.ndarray, train_idx: np.ndarray, cfg: FusionTrainConfig,
                 rng: np.random.Generator):
        if dnets is None:
            raise FusionError("fusion needs the trained disentangle stage")
        self.dnets = dnets
        self.splits = splits
        self.au = au
        self.labels = (au >= 0.5).astype(np.float64)
        self.audio = audio
        self.identity = identity
        self.train_idx = np.asarray(train_idx)
        self.cfg = cfg
        self.weights = au_weights(np.maximum(self.labels[self.train_idx].mean(axis=0), 0.01))
        fcfg = FusionConfig(crop=splits.crops.shape[-1], frame=splits.frames.shape[-1],
                            audio_dim=audio.shape[1], channels=cfg.channels)
        self.nets = self.model = FusionNets(fcfg, rng)
        self.optimizers = {"fusion": Adam(self.nets, cfg.lr)}
        self.loss_terms = ["reconstruction"] + (["au"] if cfg.use_au_loss else []) + ["feature", "identity"]

    def _sources(self, targets, rng):
        src = np.empty_like(targets)
        for k, t in enumerate(targets):
            pool = self.train_idx[self.identity[self.train_idx] == self.identity[t]]
            src[k] = pool[rng.integers(0, len(pool))]
        return src

    def id_input(self, idx):
        sp = self.splits
        return sp.identity_faces[idx] if self.cfg.disentangle else sp.frames[idx]

    def step(self, rng: np.random.Generator) -> dict[str, float]:
        cfg, nets, sp = self.cfg, self.nets, self.splits
        t = self.train_idx[rng.integers(0, len(self.train_idx), cfg.batch_size)]
        s = self._sources(t, rng)
        target = sp.audio_faces[t]

        f_src = encode_audio_face(nets, sp.audio_faces[s])
        fused = fuse_decode(nets, f_src, self.audio[t])
        rec = reconstruction_loss(fused, target)
        # E_f must keep what D_f needs to rebuild the fused image; input detached
        fused_const = fused.data
        feat = l1_mean(nets.d_f(feature_encode(nets, fused_const)), fused_const)
        id_face = self.id_input(s)
        ident = l1_mean(nets.d_id(identity_feature(nets, id_face)), id_face)

        loss = cfg.w_rec * rec + cfg.w_feat * feat + cfg.w_id * ident
        log = {"reconstruction": rec.item(), "feature": feat.item(), "identity": ident.item()}
        if cfg.use_au_loss:
            recomposed = Tensor(sp.masks[t] * sp.crops[t]) + fused
            pred = self.dnets.classifier(recomposed)
            au = au_loss(pred, self.labels[t], self.weights)
            loss = loss + cfg.w_au * au
            log["au"] = au.item()
        self.optimizers["fusion"].step(ad.module_grads(nets, loss))
        return {k: log[k] for k in self.loss_terms}


def frame_conditions(fnets: FusionNets, splits: FaceSplits, audio: np.ndarray, targets, source: int | np.ndarray,
                     disentangle: bool = True) -> np.ndarray:
    """NeRF conditions ``[f_id, f_aud_hat]`` (T, 64) for target frames.

    Identity and Audio-face come from the ``source`` frame(s); the audio
    feature from each target.  Without disentanglement the identity encoder
    sees the whole source frame and the raw audio feature, zero padded, stands
    in for the fused feature.
    """
    targets = np.atleast_1d(np.asarray(targets, dtype=int))
    src = np.broadcast_to(np.atleast_1d(np.asarray(source, dtype=int)), targets.shape)
    with ad.no_grad():
        if disentangle:
            f_id = identity_feature(fnets, splits.identity_faces[src]).data
            fused = fuse_decode(fnets, encode_audio_face(fnets, splits.audio_faces[src]), audio[targets])
            f_aud = feature_encode(fnets, fused).data
        else:
            f_id = identity_feature(fnets, splits.frames[src]).data
            f_aud = np.zeros((len(targets), FEATURE_DIM))
            f_aud[:, : audio.shape[1]] = audio[targets]
    return np.concatenate([f_id, f_aud], axis=1)
