"""Configuration, stage training, rendering, evaluation and the CLI."""

from .checkpoint import (Checkpoint, CheckpointError, CheckpointTruncatedError, CheckpointVersionError,
                         checkpoint_roundtrip, load_checkpoint, save_checkpoint)
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .evaluate import EvaluationError, evaluate, evaluate_images
from .render import load_stages, render_frames, render_sequence
from .train import MissingStageError, TrainingError, train_stage

__all__ = [
    "Checkpoint", "CheckpointError", "CheckpointTruncatedError", "CheckpointVersionError", "ConfigError",
    "EvaluationError", "MissingStageError", "RunConfig", "TrainingError", "checkpoint_roundtrip",
    "config_from_dict", "evaluate", "evaluate_images", "load_checkpoint", "load_config", "load_stages",
    "render_frames", "render_sequence", "save_checkpoint", "train_stage",
]
