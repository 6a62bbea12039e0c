"""Rendering frames from the three trained stages."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import fusion as fus
from .. import nerf
from ..rays import ray_rng
from ..synthdata import Dataset, load_dataset, save_png
from .config import RunConfig
from .train import (condition_sources, conditions_for, disentangle_nets_from, field_from, fusion_nets_from,
                    out_paths, require_checkpoint, split_indices)

RENDER_STREAM = 7  # keeps render sampling independent of the training streams


class RenderRangeError(IndexError):
    pass


@dataclass
class Stages:
    dataset: Dataset
    dnets: object
    fnets: object
    field: nerf.RadianceField
    splits: fus.FaceSplits
    conditions: np.ndarray
    disentangle: bool


def load_stages(cfg: RunConfig) -> Stages:
    d_ckpt = require_checkpoint(cfg, "render", "disentangle")
    f_ckpt = require_checkpoint(cfg, "render", "fusion")
    n_ckpt = require_checkpoint(cfg, "render", "nerf")
    ds = load_dataset(cfg.data.path)
    dnets = disentangle_nets_from(d_ckpt)
    fnets = fusion_nets_from(f_ckpt)
    field = field_from(n_ckpt)
    splits = fus.face_splits(dnets, ds)
    disentangle = bool(n_ckpt.meta.get("disentangle", True))
    sources = condition_sources(ds, cfg.data.n_heldout, int(n_ckpt.meta.get("seed", cfg.seed)))
    train_idx, _ = split_indices(len(ds), cfg.data.n_heldout)
    conds = conditions_for(disentangle, fnets, splits, ds, sources, train_idx)
    return Stages(ds, dnets, fnets, field, splits, conds, disentangle)


def render_frame(field: nerf.RadianceField, dataset: Dataset, cond: np.ndarray, n_samples: int,
                 rng: np.random.Generator, chunk: int = 1024) -> np.ndarray:
    return nerf.render_image(field, dataset.camera, cond, dataset.near, dataset.far, n_samples, rng,
                             dataset.background, chunk=chunk)


def render_frames(stages: Stages, frames, n_samples: int, seed: int, chunk: int = 1024,
                  conditions: np.ndarray | None = None) -> np.ndarray:
    """(F, H, W, 3) renders; ``conditions`` overrides the per-frame condition rows."""
    frames = np.asarray(list(frames), dtype=int)
    n = len(stages.dataset)
    if np.any(frames < 0) or np.any(frames >= n):
        raise RenderRangeError(f"frame indices must lie in [0, {n})")
    conds = stages.conditions[frames] if conditions is None else np.asarray(conditions, dtype=np.float64)
    if len(conds) != len(frames):
        raise ValueError("one condition row per frame required")
    out = [render_frame(stages.field, stages.dataset, c, n_samples, ray_rng(seed, RENDER_STREAM, f), chunk)
           for f, c in zip(frames, conds)]
    h, w = stages.dataset.images.shape[1:3]
    return np.array(out).reshape(len(frames), h, w, 3)


def frame_name(index: int) -> str:
    return f"frame_{index:05d}.png"


def render_sequence(cfg: RunConfig, frames=None, stages: Stages | None = None) -> list[Path]:
    """Render frames (default: all) to ``<out>/render/frame_XXXXX.png``."""
    stages = stages or load_stages(cfg)
    if frames is None:
        frames = range(len(stages.dataset))
    frames = list(frames)
    out_dir = out_paths(cfg)["render"]
    out_dir.mkdir(parents=True, exist_ok=True)
    if not frames:
        return []
    images = render_frames(stages, frames, cfg.render.n_samples, cfg.seed, cfg.render.chunk)
    paths = []
    for f, img in zip(frames, images):
        p = out_dir / frame_name(f)
        save_png(p, img)
        paths.append(p)
    return paths
