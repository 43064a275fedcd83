"""Downsampling operators over a shared polyphase decomposition.

A stride-s decomposition splits a feature map into the s*s interleaved
sub-grids ("components"): component q = i*s+j holds X[k, s*n1+i, s*n2+j].
Max/avg pooling reduce each s-by-s window directly; APS returns the single
component with the largest lp energy; TIPS returns a learned per-channel
convex combination of all components, with coefficients tau produced by a
small shift-invariant branch (3x3 conv, ReLU, global average pool, dense
projection, softmax). BlurPool low-passes with a binomial filter and keeps
the (0,0) component.

Inputs whose extent is not a multiple of s are zero-padded on the bottom
and right edges first, so the component indexing above stays exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import Node, _needs_grad, _wants_grad, accumulate, as_node, relu, reshape
from .nn import Conv2dParams, conv2d, global_avg_pool, kaiming_normal, linear, make_conv, softmax
from .padding import pad_spatial, unpad_grad


def _batched(v):
    if v.ndim == 4:
        return v, True
    if v.ndim == 3:
        return v[None], False
    raise ValueError(f"expected a rank-3 or rank-4 feature map, got shape {v.shape}")


# -- specs ------------------------------------------------------------------

_BINOMIAL = {3: np.array([1.0, 2.0, 1.0]), 5: np.array([1.0, 4.0, 6.0, 4.0, 1.0])}


@dataclass(frozen=True)
class BlurSpec:
    """Separable binomial low-pass filter, DC gain exactly 1."""

    lpf_size: int = 3

    def __post_init__(self):
        if self.lpf_size not in _BINOMIAL:
            raise ValueError(f"lpf size must be 3 or 5, got {self.lpf_size}")

    def kernel(self, dtype=np.float64):
        a = _BINOMIAL[self.lpf_size]
        k2 = np.outer(a, a)
        return (k2 / k2.sum()).astype(dtype)


@dataclass(frozen=True)
class ApsSpec:
    """Norm order for selecting the highest-energy polyphase component."""

    p: float = 2.0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"norm order must be >= 1, got {self.p}")


@dataclass
class TipsParams:
    """Learnable state of one TIPS layer.

    psi is the 3x3 conv whose ReLU output is both the undo-regularizer
    target branch and (by default) the trunk feeding the mixing head. When
    head is set, the mixing head gets its own conv trunk instead, leaving
    psi trained only by the undo term.
    """

    psi: Conv2dParams
    proj_w: Node  # (c*s*s, c)
    proj_b: Node  # (c*s*s,)
    stride: int = 2
    head: Conv2dParams | None = None

    @property
    def channels(self):
        return self.psi.weight.value.shape[0]


def init_tips_params(rng, channels, stride, padding_mode, dtype, shared_head=True):
    psi = make_conv(rng, channels, channels, 3, padding_mode, dtype)
    head = None if shared_head else make_conv(rng, channels, channels, 3, padding_mode, dtype)
    proj_w = Node(
        kaiming_normal(rng, (channels * stride * stride, channels), channels, dtype),
        requires_grad=True,
    )
    proj_b = Node(np.zeros(channels * stride * stride, dtype=dtype), requires_grad=True)
    return TipsParams(psi, proj_w, proj_b, stride=stride, head=head)


# -- polyphase decomposition --------------------------------------------

@dataclass
class PolyphaseStack:
    """The s*s strided sub-grids of one (possibly batched) feature map."""

    node: Node  # (n, s*s, c, ceil(h/s), ceil(w/s)) or the rank-4 unbatched form
    stride: int
    orig_hw: tuple[int, int]
    batched: bool

    def components(self):
        """Component arrays indexed by q = i*s+j (values, not nodes)."""
        v = self.node.value
        return [v[:, q] if self.batched else v[q] for q in range(self.stride ** 2)]


def pad_to_multiple(x, s):
    """Zero-pad bottom/right so both spatial extents divide by s."""
    x = as_node(x)
    xv, batched = _batched(x.value)
    h, w = xv.shape[2], xv.shape[3]
    ph = (-h) % s
    pw = (-w) % s
    if ph == 0 and pw == 0:
        return x
    out_val = np.pad(xv, [(0, 0), (0, 0), (0, ph), (0, pw)], mode="constant")
    if not batched:
        out_val = out_val[0]

    def rule(g):
        g4 = g if batched else g[None]
        gx = np.ascontiguousarray(g4[:, :, :h, :w])
        accumulate(x, gx if batched else gx[0])

    if not _needs_grad(x):
        return Node(out_val)
    return Node(out_val, parents=(x,), rule=rule)


def polyphase_decompose(x, s):
    """Split into s*s components; component i*s+j is X[k, s*n1+i, s*n2+j]."""
    if s < 2:
        raise ValueError(f"polyphase stride must be >= 2, got {s}")
    x = as_node(x)
    _, batched = _batched(x.value)
    h, w = x.value.shape[-2], x.value.shape[-1]
    xp = pad_to_multiple(x, s)
    xv = xp.value if batched else xp.value[None]
    n, c, hp, wp = xv.shape
    hh, ww = hp // s, wp // s
    stack_val = (
        xv.reshape(n, c, hh, s, ww, s)
        .transpose(0, 3, 5, 1, 2, 4)
        .reshape(n, s * s, c, hh, ww)
        .copy()
    )
    if not batched:
        stack_val = stack_val[0]

    def rule(g):
        g6 = (g if batched else g[None]).reshape(n, s, s, c, hh, ww)
        gx = g6.transpose(0, 3, 4, 1, 5, 2).reshape(n, c, hp, wp)
        accumulate(xp, gx if batched else gx[0])

    if not _needs_grad(xp):
        node = Node(stack_val)
    else:
        node = Node(stack_val, parents=(xp,), rule=rule)
    return PolyphaseStack(node, s, (h, w), batched)


def polyphase_interleave(stack_val, s, orig_hw=None):
    """Inverse of the decomposition (value level); crops to orig_hw if given."""
    batched = stack_val.ndim == 5
    sv = stack_val if batched else stack_val[None]
    n, q, c, hh, ww = sv.shape
    if q != s * s:
        raise ValueError(f"stack has {q} components, expected {s * s}")
    x = sv.reshape(n, s, s, c, hh, ww).transpose(0, 3, 4, 1, 5, 2).reshape(n, c, hh * s, ww * s)
    if orig_hw is not None:
        x = x[:, :, : orig_hw[0], : orig_hw[1]]
    return x if batched else x[0]


# -- window pooling -------------------------------------------------------

def max_pool(x, s):
    """Max over non-overlapping s-by-s windows (kernel = stride = s)."""
    if s < 2:
        raise ValueError(f"pooling stride must be >= 2, got {s}")
    xp = pad_to_multiple(as_node(x), s)
    xv, batched = _batched(xp.value)
    out_val, idx = kernels.maxpool_forward(np.ascontiguousarray(xv), s)
    if not batched:
        out_val = out_val[0]

    def rule(g):
        g4 = np.ascontiguousarray(g if batched else g[None])
        gx = kernels.maxpool_backward(g4, idx, s)
        accumulate(xp, gx if batched else gx[0])

    if not _needs_grad(xp):
        return Node(out_val)
    return Node(out_val, parents=(xp,), rule=rule)


def avg_pool(x, s):
    """Mean over non-overlapping s-by-s windows."""
    if s < 2:
        raise ValueError(f"pooling stride must be >= 2, got {s}")
    xp = pad_to_multiple(as_node(x), s)
    xv, batched = _batched(xp.value)
    n, c, h, w = xv.shape
    hh, ww = h // s, w // s
    out_val = xv.reshape(n, c, hh, s, ww, s).mean(axis=(3, 5))
    if not batched:
        out_val = out_val[0]

    def rule(g):
        g4 = g if batched else g[None]
        gwin = np.broadcast_to((g4 / (s * s))[:, :, :, None, :, None], (n, c, hh, s, ww, s))
        gx = gwin.reshape(n, c, h, w)
        accumulate(xp, gx if batched else gx[0])

    if not _needs_grad(xp):
        return Node(out_val)
    return Node(out_val, parents=(xp,), rule=rule)


def depthwise_blur(x, spec: BlurSpec, padding_mode):
    """Per-channel convolution with the binomial kernel, 'same' output size."""
    x = as_node(x)
    xv, batched = _batched(x.value)
    kern = spec.kernel(xv.dtype)
    k = kern.shape[0]
    pad = (k - 1) // 2
    h, w = xv.shape[2], xv.shape[3]
    xp_val = pad_spatial(xv, pad, padding_mode)
    out_val = np.zeros_like(xv)
    for m in range(k):
        for t in range(k):
            out_val += kern[m, t] * xp_val[:, :, m:m + h, t:t + w]
    if not batched:
        out_val = out_val[0]

    def rule(g):
        g4 = g if batched else g[None]
        gp = np.zeros_like(xp_val)
        for m in range(k):
            for t in range(k):
                gp[:, :, m:m + h, t:t + w] += kern[m, t] * g4
        gx = unpad_grad(gp, pad, padding_mode, h, w)
        accumulate(x, gx if batched else gx[0])

    if not _needs_grad(x):
        return Node(out_val)
    return Node(out_val, parents=(x,), rule=rule)


def subsample(x, s):
    """Keep the (0,0) polyphase component: x[..., ::s, ::s]."""
    x = as_node(x)
    out_val = np.ascontiguousarray(x.value[..., ::s, ::s])

    def rule(g):
        gx = np.zeros_like(x.value)
        gx[..., ::s, ::s] = g
        accumulate(x, gx)

    if not _needs_grad(x):
        return Node(out_val)
    return Node(out_val, parents=(x,), rule=rule)


def blur_pool(x, spec: BlurSpec, s, padding_mode="circular"):
    """Anti-aliased downsampling: binomial low-pass, then subsample."""
    if s < 2:
        raise ValueError(f"pooling stride must be >= 2, got {s}")
    return subsample(depthwise_blur(x, spec, padding_mode), s)


# -- APS -------------------------------------------------------------------

def component_energies(stack: PolyphaseStack, p):
    """sum |v|^p per component, over channels and positions jointly: (n, s*s)."""
    sv = stack.node.value
    sv = sv if stack.batched else sv[None]
    if p == 2:
        return (sv * sv).sum(axis=(2, 3, 4))
    return (np.abs(sv) ** p).sum(axis=(2, 3, 4))


def select_component(stack: PolyphaseStack, idx):
    """Pick component idx[n] per sample; gradient routes only into that slot."""
    sv = stack.node.value
    batched = stack.batched
    s4 = sv if batched else sv[None]
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    n = s4.shape[0]
    out_val = s4[np.arange(n), idx]
    if not batched:
        out_val = out_val[0]

    def rule(g):
        g4 = g if batched else g[None]
        gs = np.zeros_like(s4)
        gs[np.arange(n), idx] = g4
        accumulate(stack.node, gs if batched else gs[0])

    if not _needs_grad(stack.node):
        return Node(out_val)
    return Node(out_val, parents=(stack.node,), rule=rule)


def aps_pool(x, spec: ApsSpec, s):
    """Return the polyphase component of maximum lp norm (ties: lowest index)."""
    if s < 2:
        raise ValueError(f"pooling stride must be >= 2, got {s}")
    stack = polyphase_decompose(x, s)
    energies = component_energies(stack, spec.p)
    idx = np.argmax(energies, axis=1)
    return select_component(stack, idx)


# -- TIPS --------------------------------------------------------------------

def mix_components(stack: PolyphaseStack, tau):
    """Per-channel convex combination: out[k] = sum_q tau[k,q] * component q."""
    tau = as_node(tau)
    sv = stack.node.value
    batched = stack.batched
    s5 = sv if batched else sv[None]
    tv = tau.value if tau.value.ndim == 3 else tau.value[None]
    n, q, c, hh, ww = s5.shape
    if tv.shape != (n, c, q):
        raise ValueError(f"tau shape {tau.value.shape} does not match stack (n={n}, c={c}, q={q})")
    out_val = np.einsum("ncq,nqcij->ncij", tv, s5)
    if not batched:
        out_val = out_val[0]

    def rule(g):
        g4 = g if batched else g[None]
        if _wants_grad(tau):
            gt = np.einsum("ncij,nqcij->ncq", g4, s5)
            accumulate(tau, gt if tau.value.ndim == 3 else gt[0])
        if _wants_grad(stack.node):
            gs = tv.transpose(0, 2, 1)[:, :, :, None, None] * g4[:, None]
            accumulate(stack.node, gs if batched else gs[0])

    if not _needs_grad(stack.node, tau):
        return Node(out_val)
    return Node(out_val, parents=(stack.node, tau), rule=rule)


def tips_mixing(x, tp: TipsParams):
    """Mixing coefficients tau (n, c, s*s) plus the psi trunk activation.

    Every stage (conv with circular padding, ReLU, global average pool,
    dense projection, per-channel softmax) is invariant to circular shifts
    of x, so tau is too.
    """
    x = as_node(x)
    psi_out = relu(conv2d(x, tp.psi))
    trunk = psi_out if tp.head is None else relu(conv2d(x, tp.head))
    pooled = global_avg_pool(trunk)  # (n, c) or (c,)
    z = linear(pooled, tp.proj_w, tp.proj_b)
    c = tp.channels
    q = tp.stride ** 2
    shape = (-1, c, q) if z.value.ndim == 2 else (c, q)
    tau = softmax(reshape(z, shape), axis=-1)
    return tau, psi_out


def tips_pool(x, tp: TipsParams):
    """Weighted linear combination of polyphase components with learned tau."""
    x = as_node(x)
    stack = polyphase_decompose(x, tp.stride)
    tau, psi_out = tips_mixing(x, tp)
    out = mix_components(stack, tau)
    return out, tau, psi_out


# -- maximum-sampling measurement -----------------------------------------

def measure_window_max_hits(x, out, s, tol=1e-6):
    """Fraction of pooling windows whose output equals the window maximum.

    A (channel, location) pair counts as a hit when
    |out - max(window)| <= tol * max(1, |max(window)|).
    """
    xv, xb = _batched(np.asarray(x))
    ov, ob = _batched(np.asarray(out))
    if xb != ob:
        raise ValueError("x and out must both be batched or both be single maps")
    n, c, h, w = xv.shape
    ph, pw = (-h) % s, (-w) % s
    if ph or pw:
        xv = np.pad(xv, [(0, 0), (0, 0), (0, ph), (0, pw)], mode="constant")
    hh, ww = xv.shape[2] // s, xv.shape[3] // s
    if ov.shape != (n, c, hh, ww):
        raise ValueError(f"output shape {out.shape} does not match {s}-strided windows of {x.shape}")
    wmax = xv.reshape(n, c, hh, s, ww, s).max(axis=(3, 5))
    hits = np.abs(ov - wmax) <= tol * np.maximum(1.0, np.abs(wmax))
    return float(hits.mean())
