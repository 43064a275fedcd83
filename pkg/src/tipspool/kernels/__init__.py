"""Hot numeric kernels behind a switchable backend.

The default backend is the numba one when numba imports cleanly; set
``TIPSPOOL_BACKEND=numpy`` (or ``numba``) in the environment to force a
choice, or call :func:`set_backend` from code. Both backends implement the
same five functions and agree to float tolerance; ``benchmarks/bench_kernels.py``
times them side by side.
"""

import os

from . import numpy_impl

_IMPLS = {"numpy": numpy_impl}
try:
    from . import numba_impl

    _IMPLS["numba"] = numba_impl
except ImportError:  # pragma: no cover - numba is a declared dependency
    pass


def _initial_backend():
    choice = os.environ.get("TIPSPOOL_BACKEND", "").strip().lower()
    if choice:
        if choice not in _IMPLS:
            raise ValueError(
                f"TIPSPOOL_BACKEND must be one of {sorted(_IMPLS)}, got {choice!r}"
            )
        return choice
    return "numba" if "numba" in _IMPLS else "numpy"


_backend = _initial_backend()


def available_backends():
    return sorted(_IMPLS)


def backend_name():
    return _backend


def set_backend(name):
    """Select the kernel backend for all subsequent calls."""
    global _backend
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}; available: {sorted(_IMPLS)}")
    _backend = name


def conv2d_forward(x_pad, w, b, stride):
    return _IMPLS[_backend].conv2d_forward(x_pad, w, b, stride)


def conv2d_grad_input(gy, w, stride, hp, wp):
    return _IMPLS[_backend].conv2d_grad_input(gy, w, stride, hp, wp)


def conv2d_grad_weight(gy, x_pad, k, stride):
    return _IMPLS[_backend].conv2d_grad_weight(gy, x_pad, k, stride)


def maxpool_forward(x, s):
    return _IMPLS[_backend].maxpool_forward(x, s)


def maxpool_backward(gy, idx, s):
    return _IMPLS[_backend].maxpool_backward(gy, idx, s)
