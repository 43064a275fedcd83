"""Spatial padding for conv-style ops, plus the matching gradient fold."""

import numpy as np

PAD_MODES = ("zero", "circular")


def pad_spatial(v, pad, mode):
    """Pad the last two axes of v by `pad` on every side."""
    if pad == 0:
        return v
    if mode == "zero":
        width = [(0, 0)] * (v.ndim - 2) + [(pad, pad), (pad, pad)]
        return np.pad(v, width, mode="constant")
    if mode == "circular":
        h, w = v.shape[-2:]
        if pad > h or pad > w:
            raise ValueError(f"circular pad {pad} exceeds spatial extent {(h, w)}")
        width = [(0, 0)] * (v.ndim - 2) + [(pad, pad), (pad, pad)]
        return np.pad(v, width, mode="wrap")
    raise ValueError(f"unknown padding mode {mode!r}")


def unpad_grad(gp, pad, mode, h, w):
    """Map a gradient on the padded array back onto the original extent.

    Zero padding crops; circular padding folds each border band back onto
    the interior rows/columns it aliased (rows first, then columns, which
    handles the corners).
    """
    if pad == 0:
        return gp
    if mode == "zero":
        return np.ascontiguousarray(gp[..., pad:pad + h, pad:pad + w])
    if mode == "circular":
        mid = gp[..., pad:pad + h, :].copy()
        mid[..., h - pad:h, :] += gp[..., :pad, :]
        mid[..., :pad, :] += gp[..., pad + h:, :]
        out = mid[..., :, pad:pad + w].copy()
        out[..., :, w - pad:w] += mid[..., :, :pad]
        out[..., :, :pad] += mid[..., :, pad + w:]
        return out
    raise ValueError(f"unknown padding mode {mode!r}")
