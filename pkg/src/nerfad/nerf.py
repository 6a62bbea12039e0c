"""Conditional radiance field and differentiable volume rendering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, Module, Tensor


class RenderError(ValueError):
    pass


def positional_encode(v, n_freqs: int) -> np.ndarray:
    """Per coordinate and frequency k: ``sin(2^k pi v), cos(2^k pi v)``.

    Output layout along the last axis is ``[coord][k][sin, cos]`` with length
    ``2 * 3 * n_freqs`` for 3-vectors.
    """
    if n_freqs < 1:
        raise ValueError("need at least one frequency")
    v = np.asarray(v, dtype=np.float64)
    out = np.empty(v.shape + (n_freqs, 2))
    s, c = np.sin(np.pi * v), np.cos(np.pi * v)
    out[..., 0, 0], out[..., 0, 1] = s, c
    for k in range(1, n_freqs):
        # double-angle recursion; exact up to a few ulps per level
        s, c = 2.0 * s * c, (c - s) * (c + s)
        out[..., k, 0], out[..., k, 1] = s, c
    return out.reshape(*v.shape[:-1], v.shape[-1] * n_freqs * 2)


@dataclass(frozen=True)
class FieldConfig:
    pos_freqs: int = 6
    dir_freqs: int = 4
    width: int = 64
    depth: int = 4
    color_width: int = 32
    id_dim: int = 32
    aud_dim: int = 32
    pos_scale: float = 0.5  # keeps scene coordinates inside (-1, 1) before encoding

    @property
    def pos_dim(self) -> int:
        return 6 * self.pos_freqs

    @property
    def dir_dim(self) -> int:
        return 6 * self.dir_freqs

    @property
    def cond_dim(self) -> int:
        return self.id_dim + self.aud_dim


@dataclass
class ConditionPair:
    f_id: np.ndarray
    f_aud_hat: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.f_id, float), np.asarray(self.f_aud_hat, float)], axis=-1)


class RadianceField(Module):
    """Trunk over [encoded position, f_id, f_aud_hat]; density and colour heads.

    Conditions join the encoded position at the trunk input; the view
    direction enters only the colour branch.
    """

    def __init__(self, config: FieldConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        c = config
        self.trunk = Module()
        dims = [c.pos_dim + c.cond_dim] + [c.width] * c.depth
        for i in range(c.depth):
            setattr(self.trunk, f"l{i}", Linear(dims[i], dims[i + 1], rng))
        self.density = Linear(c.width, 1, rng, gain=0.1)
        self.color_hidden = Linear(c.width + c.dir_dim, c.color_width, rng)
        self.color_out = Linear(c.color_width, 3, rng, gain=1.0)

    def zero_heads(self) -> None:
        for lin in (self.density, self.color_out):
            lin.weight.data[...] = 0.0
            lin.bias.data[...] = 0.0

    def forward(self, positions, directions, cond) -> tuple[Tensor, Tensor]:
        """Colour (R,S,3) and density (R,S) at positions (R,S,3).

        ``directions`` (R,3) and ``cond`` (R, id_dim + aud_dim) are per ray.
        """
        c = self.config
        positions = np.asarray(positions, dtype=np.float64)
        directions = np.asarray(directions, dtype=np.float64)
        if positions.ndim != 3 or positions.shape[-1] != 3:
            raise ad.ShapeError("field", [positions.shape], "positions must be (R,S,3)")
        R, S, _ = positions.shape
        cond = ad.as_tensor(cond)
        if cond.ndim == 1:
            cond = ad.broadcast_to(ad.reshape(cond, (1, -1)), (R, cond.shape[0]))
        if cond.shape != (R, c.cond_dim):
            raise ad.ShapeError("field", [cond.shape], f"conditions must be (R,{c.cond_dim})")
        if directions.shape != (R, 3):
            raise ad.ShapeError("field", [directions.shape], "directions must be (R,3)")

        pe = positional_encode(positions * c.pos_scale, c.pos_freqs).reshape(R * S, c.pos_dim)
        first = self.trunk.l0
        w_pos = first.weight[: c.pos_dim]
        w_cond = first.weight[c.pos_dim :]
        per_ray = ad.matmul(cond, w_cond) + first.bias
        h = ad.reshape(ad.matmul(Tensor(pe), w_pos), (R, S, c.width)) + ad.reshape(per_ray, (R, 1, c.width))
        h = ad.relu(h)
        h = ad.reshape(h, (R * S, c.width))
        for i in range(1, c.depth):
            h = ad.relu(getattr(self.trunk, f"l{i}")(h))

        sigma = ad.softplus(ad.reshape(self.density(h), (R, S)))

        de = positional_encode(directions, c.dir_freqs)
        ch = self.color_hidden
        per_ray_dir = ad.matmul(Tensor(de), ch.weight[c.width :]) + ch.bias
        hc = ad.reshape(ad.matmul(h, ch.weight[: c.width]), (R, S, c.color_width))
        hc = ad.relu(hc + ad.reshape(per_ray_dir, (R, 1, c.color_width)))
        rgb = ad.sigmoid(self.color_out(ad.reshape(hc, (R * S, c.color_width))))
        return ad.reshape(rgb, (R, S, 3)), sigma


def field_eval(field: RadianceField, l, d, cond: ConditionPair | np.ndarray):
    """Colour and density at single points ``l`` (P,3) viewed along ``d`` (P,3)."""
    l = np.atleast_2d(np.asarray(l, dtype=np.float64))
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    if isinstance(cond, ConditionPair):
        cond = cond.stacked()
    cond = ad.as_tensor(cond)
    if cond.ndim == 1:
        cond = ad.broadcast_to(ad.reshape(cond, (1, -1)), (l.shape[0], cond.shape[0]))
    rgb, sigma = field(l[:, None, :], d, cond)
    return ad.reshape(rgb, (l.shape[0], 3)), ad.reshape(sigma, (l.shape[0],))


def segment_lengths(depths: np.ndarray, far: float) -> np.ndarray:
    """delta_i = t_{i+1} - t_i, with the last segment running to ``far``."""
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(np.diff(depths, axis=-1) <= 0):
        raise RenderError("sample depths must be strictly increasing along each ray")
    last = far - depths[..., -1:]
    if np.any(last < 0):
        raise RenderError("sample depths exceed the far bound")
    return np.concatenate([np.diff(depths, axis=-1), last], axis=-1)


def volume_render(depths, sigma, rgb, background, far: float, return_weights: bool = False):
    """Alpha-composite samples along rays.

    ``depths`` (R,S) and ``far`` are constants; ``sigma`` (R,S) and ``rgb``
    (R,S,3) may be tensors.  Residual transmittance blends in the background.
    """
    deltas = segment_lengths(depths, far)
    sigma = ad.as_tensor(sigma)
    rgb = ad.as_tensor(rgb)
    optical = sigma * Tensor(deltas)
    alpha = 1.0 - ad.exp(-optical)
    # exclusive cumulative optical depth -> T_i = prod_{j<i} (1 - alpha_j)
    before = ad.cumsum(optical, axis=-1) - optical
    trans = ad.exp(-before)
    weights = trans * alpha
    residual = ad.exp(-ad.tsum(optical, axis=-1, keepdims=True))
    color = ad.tsum(ad.reshape(weights, weights.shape + (1,)) * rgb, axis=-2)
    color = color + residual * Tensor(np.asarray(background, dtype=np.float64))
    if return_weights:
        return color, weights, trans, residual
    return color


def photometric_loss(rendered, target) -> Tensor:
    """Sum over rays of the squared colour error."""
    rendered = ad.as_tensor(rendered)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise RenderError(f"ray count mismatch: {rendered.shape} vs {target.shape}")
    diff = rendered - Tensor(target)
    return ad.tsum(diff * diff)


def render_rays(field: RadianceField, origins, directions, cond, near: float, far: float,
                n_samples: int, rng: np.random.Generator, background) -> Tensor:
    """Stratified sampling + field evaluation + compositing for a ray batch."""
    from .rays import stratified_depths

    directions = np.asarray(directions, dtype=np.float64)
    R = directions.shape[0]
    t = stratified_depths(near, far, R, n_samples, rng)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape)
    pos = origins[:, None, :] + t[..., None] * directions[:, None, :]
    rgb, sigma = field(pos, directions, cond)
    return volume_render(t, sigma, rgb, background, far)


def render_image(field: RadianceField, camera, cond: np.ndarray, near: float, far: float,
                 n_samples: int, rng: np.random.Generator, background, chunk: int = 256) -> np.ndarray:
    """Render a full (H, W, 3) frame under one condition vector."""
    dirs = camera.all_directions()
    cond = np.asarray(cond, dtype=np.float64)
    out = np.empty((dirs.shape[0], 3))
    with ad.no_grad():
        for s in range(0, dirs.shape[0], chunk):
            d = dirs[s : s + chunk]
            c = np.broadcast_to(cond, (d.shape[0], cond.shape[-1]))
            out[s : s + chunk] = render_rays(field, camera.translation, d, c, near, far,
                                             n_samples, rng, background).data
    return out.reshape(camera.height, camera.width, 3)


class NerfTrainer:
    """Random rays across training frames, each with its frame's condition vector."""

    LOSS_TERMS = ("photometric",)

    def __init__(self, config: FieldConfig, conditions: np.ndarray, images: np.ndarray, camera,
                 near: float, far: float, background, train_idx, rays_per_batch: int,
                 n_samples: int, lr: float, rng: np.random.Generator):
        if rays_per_batch < 1 or n_samples < 1:
            raise RenderError("need at least one ray and one sample per ray")
        self.model = RadianceField(config, rng)
        self.optimizers = {"field": ad.Adam(self.model, lr)}
        self.conditions = np.asarray(conditions, dtype=np.float64)
        n, h, w, _ = images.shape
        self.targets = images.reshape(n, h * w, 3)
        self.camera = camera
        self.dirs = camera.all_directions()
        self.near, self.far = near, far
        self.background = np.asarray(background, dtype=np.float64)
        self.train_idx = np.asarray(train_idx)
        self.rays_per_batch = rays_per_batch
        self.n_samples = n_samples

    def step(self, rng: np.random.Generator) -> dict[str, float]:
        r = self.rays_per_batch
        frames = self.train_idx[rng.integers(0, len(self.train_idx), r)]
        pix = rng.integers(0, self.dirs.shape[0], r)
        color = render_rays(self.model, self.camera.translation, self.dirs[pix], self.conditions[frames],
                            self.near, self.far, self.n_samples, rng, self.background)
        loss = photometric_loss(color, self.targets[frames, pix])
        self.optimizers["field"].step(ad.module_grads(self.model, loss))
        return {"photometric": loss.item()}
