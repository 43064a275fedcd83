"""Pixel-shift transforms on the trailing two axes.

Standard shift translates content and zero-fills vacated pixels (content
pushed past the boundary is lost). Circular shift wraps, so it is a pure
permutation of pixels: shifting by (h, w) is the identity.
"""

from dataclasses import dataclass

import numpy as np


def standard_shift(x, dh, dw):
    """Translate by (dh, dw) with zero fill; positive = down/right."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if abs(dh) > h or abs(dw) > w:
        raise ValueError(f"shift ({dh}, {dw}) exceeds spatial extent {(h, w)}")
    out = np.zeros_like(x)
    src_h = slice(max(0, -dh), min(h, h - dh))
    src_w = slice(max(0, -dw), min(w, w - dw))
    dst_h = slice(max(0, dh), min(h, h + dh))
    dst_w = slice(max(0, dw), min(w, w + dw))
    out[..., dst_h, dst_w] = x[..., src_h, src_w]
    return out


def circular_shift(x, dh, dw):
    """Translate by (dh, dw) with wrap-around: out[i,j] = x[(i-dh)%h, (j-dw)%w]."""
    x = np.asarray(x)
    return np.roll(x, (dh, dw), axis=(-2, -1))


@dataclass(frozen=True)
class ShiftSpec:
    """One shift transform: mode plus signed amounts."""

    mode: str
    dh: int
    dw: int

    def __post_init__(self):
        if self.mode not in ("standard", "circular"):
            raise ValueError(f"shift mode must be standard or circular, got {self.mode!r}")

    def apply(self, x):
        if self.mode == "standard":
            return standard_shift(x, self.dh, self.dw)
        return circular_shift(x, self.dh, self.dw)


def apply_shift(x, mode, dh, dw):
    return ShiftSpec(mode, int(dh), int(dw)).apply(x)
