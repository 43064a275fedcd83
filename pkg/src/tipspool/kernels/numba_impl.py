"""Numba-jitted kernels, loop-for-loop equivalents of numpy_impl.

fastmath stays off so that results are deterministic run to run. Parallel
loops only range over axes whose output slices are disjoint, so no thread
ever writes a cell another thread reads.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def conv2d_forward(x_pad, w, b, stride):
    n, c, hp, wp = x_pad.shape
    o = w.shape[0]
    k = w.shape[2]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    out = np.empty((n, o, ho, wo), dtype=x_pad.dtype)
    for img in prange(n):
        for oc in range(o):
            for i in range(ho):
                row = np.full(wo, b[oc], dtype=x_pad.dtype)
                for ic in range(c):
                    for m in range(k):
                        base = i * stride + m
                        for t in range(k):
                            wv = w[oc, ic, m, t]
                            for j in range(wo):
                                row[j] += wv * x_pad[img, ic, base, j * stride + t]
                out[img, oc, i, :] = row
    return out


@njit(cache=True, parallel=True)
def conv2d_grad_input(gy, w, stride, hp, wp):
    n, o, ho, wo = gy.shape
    c = w.shape[1]
    k = w.shape[2]
    gx = np.zeros((n, c, hp, wp), dtype=gy.dtype)
    for img in prange(n):
        for oc in range(o):
            for ic in range(c):
                for i in range(ho):
                    for m in range(k):
                        base = i * stride + m
                        for t in range(k):
                            wv = w[oc, ic, m, t]
                            for j in range(wo):
                                gx[img, ic, base, j * stride + t] += wv * gy[img, oc, i, j]
    return gx


@njit(cache=True, parallel=True)
def conv2d_grad_weight(gy, x_pad, k, stride):
    n, o, ho, wo = gy.shape
    c = x_pad.shape[1]
    gw = np.zeros((o, c, k, k), dtype=gy.dtype)
    for oc in prange(o):
        for img in range(n):
            for ic in range(c):
                for m in range(k):
                    for t in range(k):
                        acc = gw[oc, ic, m, t]
                        for i in range(ho):
                            base = i * stride + m
                            for j in range(wo):
                                acc += gy[img, oc, i, j] * x_pad[img, ic, base, j * stride + t]
                        gw[oc, ic, m, t] = acc
    return gw


@njit(cache=True, parallel=True)
def maxpool_forward(x, s):
    n, c, h, w = x.shape
    hh = h // s
    ww = w // s
    out = np.empty((n, c, hh, ww), dtype=x.dtype)
    idx = np.empty((n, c, hh, ww), dtype=np.int64)
    for img in prange(n):
        for ch in range(c):
            for i in range(hh):
                for j in range(ww):
                    best = x[img, ch, i * s, j * s]
                    arg = 0
                    for m in range(s):
                        for t in range(s):
                            v = x[img, ch, i * s + m, j * s + t]
                            if v > best:
                                best = v
                                arg = m * s + t
                    out[img, ch, i, j] = best
                    idx[img, ch, i, j] = arg
    return out, idx


@njit(cache=True, parallel=True)
def maxpool_backward(gy, idx, s):
    n, c, hh, ww = gy.shape
    gx = np.zeros((n, c, hh * s, ww * s), dtype=gy.dtype)
    for img in prange(n):
        for ch in range(c):
            for i in range(hh):
                for j in range(ww):
                    a = idx[img, ch, i, j]
                    gx[img, ch, i * s + a // s, j * s + a % s] = gy[img, ch, i, j]
    return gx
