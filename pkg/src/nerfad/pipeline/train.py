"""Stage training with checkpointing, CSV loss logs and bit-exact resume."""

from __future__ import annotations

import csv
import io
import logging
from collections import OrderedDict
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .. import disentangle as dis
from .. import fusion as fus
from .. import nerf
from ..synthdata import load_dataset
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import STAGES, RunConfig

log = logging.getLogger(__name__)

PREREQUISITES = {"disentangle": (), "fusion": ("disentangle",), "nerf": ("disentangle", "fusion")}


class TrainingError(RuntimeError):
    pass


class MissingStageError(TrainingError):
    def __init__(self, stage: str, needed: str, path: Path):
        self.stage, self.needed = stage, needed
        super().__init__(f"stage '{stage}' needs the '{needed}' checkpoint, not found at {path}")


def out_paths(cfg: RunConfig) -> dict[str, Path]:
    root = Path(cfg.out_dir)
    return {"root": root, "checkpoints": root / "checkpoints", "logs": root / "logs",
            "render": root / "render", "metrics": root / "metrics.csv"}


def checkpoint_path(cfg: RunConfig, stage: str) -> Path:
    return out_paths(cfg)["checkpoints"] / f"{stage}.ckpt"


def stage_rngs(seed: int, stage: str) -> tuple[np.random.Generator, np.random.Generator]:
    """(initialisation rng, training rng) for a stage, derived from the run seed."""
    seq = np.random.SeedSequence([int(seed), STAGES.index(stage)])
    init, train = seq.spawn(2)
    return np.random.default_rng(init), np.random.default_rng(train)


def split_indices(n_frames: int, n_heldout: int) -> tuple[np.ndarray, np.ndarray]:
    """Training frames first; the last ``n_heldout`` frames are held out."""
    cut = n_frames - n_heldout
    return np.arange(cut), np.arange(cut, n_frames)


# ---- model reconstruction from checkpoints -----------------------------------------

def _load_module(module, ckpt: Checkpoint):
    module.load_state_dict(ckpt.group("model"))
    return module


def disentangle_nets_from(ckpt: Checkpoint) -> dis.DisentangleNets:
    m = ckpt.meta["nets"]
    nets = dis.DisentangleNets(dis.NetConfig(crop=m["crop"], n_au=m["n_au"], channels=m["channels"]),
                               np.random.default_rng(0))
    return _load_module(nets, ckpt)


def fusion_nets_from(ckpt: Checkpoint) -> fus.FusionNets:
    m = ckpt.meta["nets"]
    nets = fus.FusionNets(fus.FusionConfig(crop=m["crop"], frame=m["frame"], audio_dim=m["audio_dim"],
                                           channels=m["channels"]), np.random.default_rng(0))
    return _load_module(nets, ckpt)


def field_from(ckpt: Checkpoint) -> nerf.RadianceField:
    field = nerf.RadianceField(nerf.FieldConfig(**ckpt.meta["nets"]), np.random.default_rng(0))
    return _load_module(field, ckpt)


def require_checkpoint(cfg: RunConfig, stage: str, needed: str) -> Checkpoint:
    path = checkpoint_path(cfg, needed)
    if not path.exists():
        raise MissingStageError(stage, needed, path)
    ckpt = load_checkpoint(path)
    if ckpt.stage != needed:
        raise CheckpointError(f"{path} holds stage '{ckpt.stage}', expected '{needed}'")
    return ckpt


SOURCE_STREAM = len(STAGES)  # rng stream for the per-frame identity sources


def condition_sources(dataset, n_heldout: int, seed: int) -> np.ndarray:
    """Frame supplying the identity and Audio-face inputs of each frame's condition.

    A training frame gets a fixed random training frame of its identity, never
    itself when another exists, so the identity input is a separate image as
    it is at inference.  Held-out frames use the identity's reference frame.
    """
    train_idx, _ = split_indices(len(dataset), n_heldout)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), SOURCE_STREAM]))
    src = np.array([dataset.reference_index(i) for i in dataset.identity], dtype=int)
    for t in train_idx:
        pool = train_idx[(dataset.identity[train_idx] == dataset.identity[t]) & (train_idx != t)]
        if len(pool):
            src[t] = pool[rng.integers(0, len(pool))]
    return src


def conditions_for(disentangle: bool, fnets, splits, dataset, sources, train_idx) -> np.ndarray:
    """Condition vectors of every frame from the given source frames.

    The audio block is centred and scaled to unit mean variance with
    training-frame statistics, so fused features and raw audio reach the
    field at the same scale.
    """
    conds = fus.frame_conditions(fnets, splits, dataset.audio, np.arange(len(dataset)), sources,
                                 disentangle=disentangle)
    aud = conds[:, fus.FEATURE_DIM:]
    ref = aud[train_idx]
    mu = ref.mean(axis=0)
    scale = np.sqrt(ref.var(axis=0).mean())
    conds[:, fus.FEATURE_DIM:] = (aud - mu) / max(scale, 1e-12)
    return conds


# ---- trainers ----------------------------------------------------------------------

def build_trainer(cfg: RunConfig, stage: str, init_rng: np.random.Generator):
    """Trainer object plus checkpoint metadata needed to rebuild its model."""
    ds = load_dataset(cfg.data.path)
    if len(ds) <= cfg.data.n_heldout:
        raise TrainingError(f"dataset has {len(ds)} frames; need more than n_heldout={cfg.data.n_heldout}")
    train_idx, _ = split_indices(len(ds), cfg.data.n_heldout)
    for needed in PREREQUISITES[stage]:
        if not checkpoint_path(cfg, needed).exists():
            raise MissingStageError(stage, needed, checkpoint_path(cfg, needed))

    if stage == "disentangle":
        s = cfg.disentangle_stage
        tcfg = dis.DisentangleTrainConfig(
            batch_size=s.batch_size, lr=s.lr, beta1=s.beta1, beta2=s.beta2, n_critic=s.n_critic,
            gp_lambda=s.gp_lambda, w_adv=s.w_adv, w_au=s.w_au, w_cycle=s.w_cycle, w_mask=s.w_mask,
            mask_bias=s.mask_bias, channels=s.channels)
        crops = ds.crops()
        trainer = dis.DisentangleTrainer(crops[train_idx], ds.au[train_idx], ds.n_driving, tcfg, init_rng)
        meta = {"crop": int(crops.shape[-1]), "n_au": ds.n_au, "channels": s.channels}
        terms = list(dis.DisentangleTrainer.LOSS_TERMS)
    elif stage == "fusion":
        s = cfg.fusion_stage
        dnets = disentangle_nets_from(require_checkpoint(cfg, stage, "disentangle"))
        splits = fus.face_splits(dnets, ds)
        tcfg = fus.FusionTrainConfig(
            batch_size=s.batch_size, lr=s.lr, w_rec=s.w_rec, w_au=s.w_au, w_feat=s.w_feat, w_id=s.w_id,
            use_au_loss=cfg.use_au_loss, disentangle=cfg.disentangle, channels=s.channels)
        trainer = fus.FusionTrainer(dnets, splits, ds.au, ds.audio, ds.identity, train_idx, tcfg, init_rng)
        fc = trainer.nets.cfg
        meta = {"crop": fc.crop, "frame": fc.frame, "audio_dim": fc.audio_dim, "channels": fc.channels}
        terms = list(trainer.loss_terms)
    else:
        s = cfg.nerf_stage
        dnets = disentangle_nets_from(require_checkpoint(cfg, stage, "disentangle"))
        fnets = fusion_nets_from(require_checkpoint(cfg, stage, "fusion"))
        splits = fus.face_splits(dnets, ds)
        conds = conditions_for(cfg.disentangle, fnets, splits, ds,
                               condition_sources(ds, cfg.data.n_heldout, cfg.seed), train_idx)
        fcfg = nerf.FieldConfig(pos_freqs=s.pos_freqs, dir_freqs=s.dir_freqs, width=s.width, depth=s.depth,
                                color_width=s.color_width)
        trainer = nerf.NerfTrainer(fcfg, conds, ds.images, ds.camera, ds.near, ds.far, ds.background,
                                   train_idx, s.rays_per_batch, s.n_samples, s.lr, init_rng)
        meta = asdict(fcfg)
        terms = list(nerf.NerfTrainer.LOSS_TERMS)
    return trainer, meta, terms


def _capture(trainer, stage: str, iteration: int, rng, meta: dict, cfg: RunConfig,
             terms: list[str], history: list[dict]) -> Checkpoint:
    tensors = OrderedDict(("model/" + k, v) for k, v in trainer.model.state_dict().items())
    steps = {}
    for name, opt in trainer.optimizers.items():
        for k, v in opt.state_dict().items():
            tensors[f"optim/{name}/{k}"] = v
        steps[name] = opt.step_count
    tensors["log/iteration"] = np.array([r["iteration"] for r in history], dtype=np.float64)
    for t in terms:
        tensors[f"log/{t}"] = np.array([r[t] for r in history], dtype=np.float64)
    return Checkpoint(
        stage=stage, iteration=iteration, tensors=tensors, rng_state=rng.bit_generator.state,
        optimizer_steps=steps,
        meta={"nets": meta, "terms": terms, "use_au_loss": cfg.use_au_loss,
              "disentangle": cfg.disentangle, "seed": cfg.seed},
    )


def _restore(trainer, ckpt: Checkpoint, rng, terms: list[str]) -> list[dict]:
    trainer.model.load_state_dict(ckpt.group("model"))
    for name, opt in trainer.optimizers.items():
        opt.load_state_dict(ckpt.group(f"optim/{name}"), ckpt.optimizer_steps[name])
    rng.bit_generator.state = ckpt.rng_state
    its = ckpt.tensors.get("log/iteration", np.zeros(0))
    return [{"iteration": int(it), **{t: float(ckpt.tensors[f"log/{t}"][k]) for t in terms}}
            for k, it in enumerate(its)]


def format_csv(terms: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration"] + terms)
    for r in rows:
        w.writerow([r["iteration"]] + [repr(float(r[t])) for t in terms])
    return buf.getvalue()


def train_stage(cfg: RunConfig, stage: str, resume: str | Path | None = None) -> Checkpoint:
    """Train one stage; writes ``checkpoints/<stage>.ckpt`` and ``logs/<stage>.csv``."""
    cfg.validate()
    section = cfg.stage_section(stage)
    paths = out_paths(cfg)
    init_rng, rng = stage_rngs(cfg.seed, stage)
    trainer, meta, terms = build_trainer(cfg, stage, init_rng)

    history: list[dict] = []
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.stage != stage:
            raise CheckpointError(f"cannot resume stage '{stage}' from a '{ckpt.stage}' checkpoint")
        history = _restore(trainer, ckpt, rng, terms)
        start = ckpt.iteration
        if start > section.iterations:
            raise TrainingError(f"checkpoint is at iteration {start}, beyond the configured {section.iterations}")

    paths["logs"].mkdir(parents=True, exist_ok=True)
    every = cfg.checkpoint_every
    for it in range(start + 1, section.iterations + 1):
        losses = trainer.step(rng)
        bad = [k for k, v in losses.items() if not np.isfinite(v)]
        if bad:
            raise TrainingError(f"non-finite {', '.join(bad)} loss at iteration {it} of stage '{stage}': {losses}")
        history.append({"iteration": it, **losses})
        if every and it % every == 0 and it != section.iterations:
            snap = _capture(trainer, stage, it, rng, meta, cfg, terms, history)
            save_checkpoint(snap, paths["checkpoints"] / f"{stage}-{it:06d}.ckpt")
            log.info("%s: iteration %d %s", stage, it, losses)

    final = _capture(trainer, stage, section.iterations, rng, meta, cfg, terms, history)
    save_checkpoint(final, checkpoint_path(cfg, stage))
    (paths["logs"] / f"{stage}.csv").write_text(format_csv(terms, history))
    return final
