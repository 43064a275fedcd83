"""Flat key = value run configuration.

One file fully determines a run; parsing rejects unknown keys and
re-rendering a parsed config reproduces it losslessly (floats are written
with repr, which round-trips exactly).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from ..losses import LossSchedule
from ..metrics import ShiftSampler
from ..model import ModelConfig
from ..data import SyntheticSpec


class ConfigError(Exception):
    """Invalid configuration file or settings."""


@dataclass(frozen=True)
class RunConfig:
    # experiment identity
    seed: int = 0
    # model
    pool: str = "tips"
    lpf: int = 0
    padding_mode: str = "circular"
    channels: tuple = (6, 12, 24)
    blocks_per_stage: int = 1
    num_classes: int = 4
    aps_p: float = 2.0
    psi_shared: bool = True
    # data
    dataset: str = "synthetic"
    data_seed: int = 1
    n_train: int = 4000
    n_test: int = 1000
    image_size: int = 32
    scale_min: float = 2.5
    scale_max: float = 5.0
    margin: int = 1
    noise: float = 0.05
    salt: float = 0.03
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    # optimizer
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 40
    batch_size: int = 64
    # regularizers
    alpha: float = 0.35
    epsilon: float = 0.4
    use_fm: bool = True
    use_undo: bool = True
    undo_target: str = "shifted"  # "shifted": psi(X) ~ X^t; "original": psi(X^t) ~ X
    # training control
    patience: int = 10
    val_fraction: float = 0.1
    # evaluation
    pairs_per_image: int = 5
    max_shift_fraction: float = 0.125
    patch_sizes: tuple = ()

    def validate(self):
        try:
            self.model_config()
            self.schedule()
            self.sampler()
            if self.dataset == "synthetic":
                self.synthetic_spec()
            elif self.dataset == "idx":
                for key in ("idx_train_images", "idx_train_labels", "idx_test_images", "idx_test_labels"):
                    if not getattr(self, key):
                        raise ValueError(f"dataset=idx requires {key}")
            else:
                raise ValueError(f"dataset must be synthetic or idx, got {self.dataset!r}")
            if self.seed < 0 or self.data_seed < 0:
                raise ValueError("seeds must be nonnegative")
            if self.lr <= 0 or not (0 <= self.momentum < 1) or self.weight_decay < 0:
                raise ValueError("bad optimizer settings")
            if self.epochs < 0 or self.batch_size < 1:
                raise ValueError("bad epochs/batch_size")
            if not (0 <= self.val_fraction < 1):
                raise ValueError("val_fraction must lie in [0, 1)")
            if self.undo_target not in ("shifted", "original"):
                raise ValueError(f"undo_target must be shifted or original, got {self.undo_target!r}")
            if any(p < 0 for p in self.patch_sizes):
                raise ValueError("patch sizes must be nonnegative")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # -- views onto the domain objects -----------------------------------

    def model_config(self):
        return ModelConfig(
            channels=tuple(self.channels),
            blocks_per_stage=self.blocks_per_stage,
            pooling_kind=self.pool,
            lpf=self.lpf,
            num_classes=self.num_classes,
            in_channels=1,
            padding_mode=self.padding_mode,
            aps_p=self.aps_p,
            psi_shared=self.psi_shared,
        )

    def schedule(self):
        return LossSchedule(alpha=self.alpha, epsilon=self.epsilon, total_epochs=self.epochs)

    def sampler(self):
        return ShiftSampler(
            seed=self.seed,
            max_fraction=self.max_shift_fraction,
            pairs_per_image=self.pairs_per_image,
        )

    def synthetic_spec(self):
        return SyntheticSpec(
            seed=self.data_seed,
            n_train=self.n_train,
            n_test=self.n_test,
            image_size=self.image_size,
            num_classes=self.num_classes,
            scale_min=self.scale_min,
            scale_max=self.scale_max,
            margin=self.margin,
            noise=self.noise,
            salt=self.salt,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _render_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key, raw):
    raw = raw.strip()
    default = getattr(RunConfig, key)
    try:
        if isinstance(default, bool):
            if raw not in ("true", "false"):
                raise ValueError(f"expected true/false, got {raw!r}")
            return raw == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            return tuple(int(x) for x in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc


def render_config(cfg: RunConfig):
    lines = [f"{f.name} = {_render_value(getattr(cfg, f.name))}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def parse_config(text):
    """Parse key = value lines; '#' starts a comment, unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return RunConfig(**values).validate()


def config_digest(cfg: RunConfig):
    """Short stable identifier for one configuration."""
    return hashlib.sha256(render_config(cfg).encode("utf-8")).hexdigest()[:12]
