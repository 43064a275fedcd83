"""Convolutional building blocks and the small CNN classifier.

Feature maps are (channels, height, width) arrays; every op here also
accepts a leading batch axis and returns output of matching rank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import (
    Node,
    _needs_grad,
    _wants_grad,
    accumulate,
    as_node,
)
from .padding import pad_spatial, unpad_grad


def _batched(v):
    """View a feature map as (n,c,h,w); remember whether it arrived rank-3."""
    if v.ndim == 4:
        return v, True
    if v.ndim == 3:
        return v[None], False
    raise ValueError(f"expected a rank-3 or rank-4 feature map, got shape {v.shape}")


@dataclass
class Conv2dParams:
    """Weights for one cross-correlation layer.

    weight is (out_ch, in_ch, k, k); pad is applied on every side before the
    stride walk. With pad == (k-1)//2 the kernel must be odd so stride 1
    preserves spatial shape.
    """

    weight: Node
    bias: Node
    stride: int = 1
    padding_mode: str = "circular"
    pad: int = 0

    def __post_init__(self):
        if self.weight.value.ndim != 4 or self.weight.value.shape[2] != self.weight.value.shape[3]:
            raise ValueError(f"conv weight must be (out,in,k,k), got {self.weight.value.shape}")
        k = self.weight.value.shape[2]
        if self.pad < 0 or self.stride < 1:
            raise ValueError("pad must be >= 0 and stride >= 1")
        if self.pad > 0 and self.pad == (k - 1) // 2 and k % 2 == 0:
            raise ValueError(f"'same' padding requires an odd kernel, got k={k}")
        if self.padding_mode not in ("zero", "circular"):
            raise ValueError(f"unknown padding mode {self.padding_mode!r}")

    @property
    def kernel_size(self):
        return self.weight.value.shape[2]


def conv2d(x, p: Conv2dParams):
    """out[o,i,j] = bias[o] + sum_{c,m,t} w[o,c,m,t] * x_pad[c, i*s+m, j*s+t]."""
    x = as_node(x)
    xv, batched = _batched(x.value)
    w, b = p.weight, p.bias
    if w.value.dtype != x.value.dtype:
        raise TypeError(f"conv2d dtype mismatch: input {x.value.dtype} vs weight {w.value.dtype}")
    if xv.shape[1] != w.value.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {xv.shape[1]} channels, "
            f"weight expects {w.value.shape[1]}"
        )
    k = p.kernel_size
    h, wd = xv.shape[2], xv.shape[3]
    xp = pad_spatial(xv, p.pad, p.padding_mode)
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ValueError(f"spatial extent {xp.shape[2:]} smaller than kernel {k} after padding")
    out_val = kernels.conv2d_forward(xp, w.value, b.value, p.stride)
    if not batched:
        out_val = out_val[0]

    def rule(g):
        g4 = g if batched else g[None]
        g4 = np.ascontiguousarray(g4)
        if _wants_grad(b):
            accumulate(b, g4.sum(axis=(0, 2, 3)))
        if _wants_grad(w):
            accumulate(w, kernels.conv2d_grad_weight(g4, xp, k, p.stride))
        if _wants_grad(x):
            gxp = kernels.conv2d_grad_input(g4, w.value, p.stride, xp.shape[2], xp.shape[3])
            gx = unpad_grad(gxp, p.pad, p.padding_mode, h, wd)
            accumulate(x, gx if batched else gx[0])

    if not _needs_grad(x, w, b):
        return Node(out_val)
    return Node(out_val, parents=(x, w, b), rule=rule)


def linear(x, w, b):
    """y = x @ w.T + b with w of shape (out_features, in_features)."""
    x = as_node(x)
    w = as_node(w)
    b = as_node(b)
    xv = x.value if x.value.ndim == 2 else x.value[None]
    single = x.value.ndim == 1
    if xv.shape[1] != w.value.shape[1]:
        raise ValueError(f"linear: input features {xv.shape[1]} vs weight in-features {w.value.shape[1]}")
    out_val = xv @ w.value.T + b.value
    if single:
        out_val = out_val[0]

    def rule(g):
        g2 = g if not single else g[None]
        if _wants_grad(x):
            gx = g2 @ w.value
            accumulate(x, gx if not single else gx[0])
        if _wants_grad(w):
            accumulate(w, g2.T @ xv)
        if _wants_grad(b):
            accumulate(b, g2.sum(axis=0))

    if not _needs_grad(x, w, b):
        return Node(out_val)
    return Node(out_val, parents=(x, w, b), rule=rule)


def global_avg_pool(x):
    """Mean over all spatial positions: (c,h,w) -> (c,), (n,c,h,w) -> (n,c).

    Accumulates in float64 so that permuting a float32 map (e.g. by a
    circular shift) cannot move the result by a ulp.
    """
    x = as_node(x)
    if x.value.ndim not in (3, 4):
        raise ValueError(f"global_avg_pool expects rank 3 or 4, got {x.value.shape}")
    out_val = x.value.mean(axis=(-2, -1), dtype=np.float64).astype(x.value.dtype)
    area = x.value.shape[-2] * x.value.shape[-1]

    def rule(g):
        accumulate(x, np.broadcast_to((g / area)[..., None, None], x.value.shape))

    if not _needs_grad(x):
        return Node(out_val)
    return Node(out_val, parents=(x,), rule=rule)


def softmax(x, axis=-1):
    """Numerically stable softmax along one axis."""
    x = as_node(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_val = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * out_val).sum(axis=axis, keepdims=True)
        accumulate(x, out_val * (g - dot))

    if not _needs_grad(x):
        return Node(out_val)
    return Node(out_val, parents=(x,), rule=rule)


def cross_entropy(logits, labels):
    """Mean of -log softmax(logits)[label] over the batch."""
    logits = as_node(logits)
    lv = logits.value if logits.value.ndim == 2 else logits.value[None]
    single = logits.value.ndim == 1
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = lv.shape
    if lab.shape != (n,):
        raise ValueError(f"cross_entropy: {n} logit rows but labels shape {lab.shape}")
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(f"cross_entropy: label out of range [0, {k}), got {lab.min()}..{lab.max()}")
    z = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    losses = lse - z[np.arange(n), lab]
    out_val = np.asarray(losses.mean(), dtype=lv.dtype)

    def rule(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), lab] -= 1.0
        p *= float(g) / n
        accumulate(logits, p if not single else p[0])

    if not _needs_grad(logits):
        return Node(out_val)
    return Node(out_val, parents=(logits,), rule=rule)


def kaiming_normal(rng, shape, fan_in, dtype):
    """He-normal init: std = sqrt(2 / fan_in)."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def make_conv(rng, in_ch, out_ch, k, padding_mode, dtype, stride=1, pad=None):
    pad = (k - 1) // 2 if pad is None else pad
    w = Node(kaiming_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k, dtype), requires_grad=True)
    b = Node(np.zeros(out_ch, dtype=dtype), requires_grad=True)
    return Conv2dParams(w, b, stride=stride, padding_mode=padding_mode, pad=pad)
