"""Pure-numpy kernels.

Convolutions use the tap-slice formulation (one channel contraction per
kernel position), which avoids materializing the full im2col patch matrix;
for very shallow inputs (c*k*k <= 16, e.g. the stem conv) the patch matrix
is small enough that a single GEMM wins, so that path is special-cased.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

_IM2COL_MAX_PATCH = 16


def _patches(x_pad, k, stride, ho, wo):
    n, c = x_pad.shape[:2]
    s = x_pad.strides
    return as_strided(
        x_pad,
        (n, ho, wo, c, k, k),
        (s[0], s[2] * stride, s[3] * stride, s[1], s[2], s[3]),
    )


def conv2d_forward(x_pad, w, b, stride):
    """Cross-correlate padded input (n,c,hp,wp) with w (o,c,k,k) at `stride`."""
    n, c, hp, wp = x_pad.shape
    o, _, k, _ = w.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    if c * k * k <= _IM2COL_MAX_PATCH:
        col = np.ascontiguousarray(_patches(x_pad, k, stride, ho, wo)).reshape(n * ho * wo, -1)
        out = col @ w.reshape(o, -1).T + b
        return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    out = np.empty((n, ho, wo, o), dtype=x_pad.dtype)
    out[:] = b
    hi = (ho - 1) * stride + 1
    wi = (wo - 1) * stride + 1
    for m in range(k):
        for t in range(k):
            xs = x_pad[:, :, m:m + hi:stride, t:t + wi:stride]
            # (n,c,ho,wo) x (o,c) -> (n,ho,wo,o)
            out += np.tensordot(xs, w[:, :, m, t], axes=([1], [1]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_grad_input(gy, w, stride, hp, wp):
    """Gradient of conv2d_forward w.r.t. the padded input.

    Computed as a stride-1 correlation of the (dilated, edge-padded) output
    gradient with the spatially flipped kernel, channel axes swapped; this
    reuses the fast forward path instead of scatter-adding tap slices.
    """
    n, o, ho, wo = gy.shape
    _, c, k, _ = w.shape
    hi = (ho - 1) * stride + 1
    wi = (wo - 1) * stride + 1
    buf = np.zeros((n, o, hi + 2 * (k - 1), wi + 2 * (k - 1)), dtype=gy.dtype)
    buf[:, :, k - 1:k - 1 + hi:stride, k - 1:k - 1 + wi:stride] = gy
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx = conv2d_forward(buf, w_flip, np.zeros(c, dtype=gy.dtype), 1)
    if gx.shape[2] != hp or gx.shape[3] != wp:
        # rows/cols past the last stride step never fed the output
        out = np.zeros((n, c, hp, wp), dtype=gy.dtype)
        out[:, :, : gx.shape[2], : gx.shape[3]] = gx
        return out
    return gx


def conv2d_grad_weight(gy, x_pad, k, stride):
    """Gradient of conv2d_forward w.r.t. the weight tensor."""
    n, o, ho, wo = gy.shape
    c = x_pad.shape[1]
    gy_flat = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(o, -1)  # copied once
    gw = np.empty((o, c, k, k), dtype=gy.dtype)
    hi = (ho - 1) * stride + 1
    wi = (wo - 1) * stride + 1
    for m in range(k):
        for t in range(k):
            xs = x_pad[:, :, m:m + hi:stride, t:t + wi:stride]
            xs_flat = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(-1, c)
            gw[:, :, m, t] = gy_flat @ xs_flat
    return gw


def maxpool_forward(x, s):
    """Non-overlapping s-by-s max over (n,c,h,w); h and w must be multiples of s.

    Returns (out, idx) where idx holds the flat within-window argmax
    (row-major, first maximum on ties).
    """
    n, c, h, w = x.shape
    hh, ww = h // s, w // s
    win = x.reshape(n, c, hh, s, ww, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh, ww, s * s)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int64)


def maxpool_backward(gy, idx, s):
    """Scatter gy back to the argmax positions recorded by maxpool_forward."""
    n, c, hh, ww = gy.shape
    gwin = np.zeros((n, c, hh, ww, s * s), dtype=gy.dtype)
    np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
    return gwin.reshape(n, c, hh, ww, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh * s, ww * s)
