"""Training, evaluation, correlation and ablation harness plus run configs."""

from .config import ConfigError, RunConfig, config_digest, parse_config, render_config
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    CkptMagicError,
    CkptTruncatedError,
    CkptVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .runs import (
    NumericError,
    ablate,
    build_datasets,
    correlate,
    evaluate_model,
    load_model,
    train_run,
)

__all__ = [
    "ConfigError",
    "RunConfig",
    "config_digest",
    "parse_config",
    "render_config",
    "Checkpoint",
    "CheckpointError",
    "CkptMagicError",
    "CkptTruncatedError",
    "CkptVersionError",
    "load_checkpoint",
    "save_checkpoint",
    "NumericError",
    "ablate",
    "build_datasets",
    "correlate",
    "evaluate_model",
    "load_model",
    "train_run",
]
