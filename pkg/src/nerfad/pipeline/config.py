"""Run configuration: nested dataclasses stored as one JSON document."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

STAGES = ("disentangle", "fusion", "nerf")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    path: str = "data"
    n_frames: int = 72
    resolution: int = 32
    n_identities: int = 1
    n_au: int = 8
    n_landmarks: int = 20
    audio_dim: int = 16
    audio_noise: float = 0.02
    crop_size: int = 32
    au_step: float = 0.2
    n_heldout: int = 8


@dataclass
class DisentangleSection:
    iterations: int = 1000
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


@dataclass
class FusionSection:
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 5e-4
    w_rec: float = 1.0
    w_au: float = 0.1
    w_feat: float = 1.0
    w_id: float = 1.0
    channels: int = 8


@dataclass
class NerfSection:
    iterations: int = 2000
    rays_per_batch: int = 1024
    n_samples: int = 64
    lr: float = 5e-4
    pos_freqs: int = 6
    dir_freqs: int = 4
    width: int = 64
    depth: int = 4
    color_width: int = 32


@dataclass
class RenderSection:
    n_samples: int = 128
    chunk: int = 1024


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    use_au_loss: bool = True
    disentangle: bool = True
    checkpoint_every: int = 0  # 0: only the final checkpoint
    data: DataSection = field(default_factory=DataSection)
    disentangle_stage: DisentangleSection = field(default_factory=DisentangleSection)
    fusion_stage: FusionSection = field(default_factory=FusionSection)
    nerf_stage: NerfSection = field(default_factory=NerfSection)
    render: RenderSection = field(default_factory=RenderSection)

    def validate(self) -> None:
        for sec in (self.disentangle_stage, self.fusion_stage, self.nerf_stage):
            if sec.iterations < 0:
                raise ConfigError("iteration counts must be nonnegative")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be nonnegative")
        if self.data.n_heldout >= self.data.n_frames:
            raise ConfigError("n_heldout must leave at least one training frame")

    def stage_section(self, stage: str):
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
        return getattr(self, f"{stage}_stage")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys at {where or 'top level'}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}{name}.")
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}{name}: expected true/false")
            kwargs[name] = value
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}{name}: expected an integer")
            kwargs[name] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}{name}: expected a number")
            kwargs[name] = float(value)
        else:
            kwargs[name] = str(value)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(data)
