"""Shift-invariant pooling operators and their measurement harness."""

__version__ = "0.1.0"

from . import autodiff, data, kernels, losses, metrics, model, nn, pooling, shifts
from .harness import RunConfig, parse_config, render_config

__all__ = [
    "autodiff",
    "data",
    "kernels",
    "losses",
    "metrics",
    "model",
    "nn",
    "pooling",
    "shifts",
    "RunConfig",
    "parse_config",
    "render_config",
    "__version__",
]
