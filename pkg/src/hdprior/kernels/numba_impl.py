"""Explicit-loop kernels compiled with numba.

Every output element is accumulated by a single loop in a fixed order, so
results are reproducible across runs.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def _pad(x, pad):
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    return xp


@njit(cache=True)
def _conv_fwd(x, w, b, stride, pad):
    xp = _pad(x, pad)
    n, c = x.shape[0], x.shape[1]
    co, _, kh, kw = w.shape
    oh = (xp.shape[2] - kh) // stride + 1
    ow = (xp.shape[3] - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for s in range(n):
        for o in range(co):
            for ci in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[o, ci, ki, kj]
                        if stride == 1:
                            for y in range(oh):
                                for xx in range(ow):
                                    out[s, o, y, xx] += wv * xp[s, ci, y + ki, xx + kj]
                        else:
                            for y in range(oh):
                                for xx in range(ow):
                                    out[s, o, y, xx] += wv * xp[s, ci, y * stride + ki, xx * stride + kj]
            for y in range(oh):
                for xx in range(ow):
                    out[s, o, y, xx] += b[o]
    return out


@njit(cache=True)
def _conv_bwd(x, w, gout, stride, pad):
    xp = _pad(x, pad)
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh, ow = gout.shape[2], gout.shape[3]
    gxp = np.zeros(xp.shape)
    gw = np.zeros((co, c, kh, kw))
    gb = np.zeros(co)
    for o in range(co):
        acc = 0.0
        for s in range(n):
            for y in range(oh):
                for xx in range(ow):
                    acc += gout[s, o, y, xx]
        gb[o] = acc
    accv = np.zeros(ow)
    for o in range(co):
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    accv[:] = 0.0
                    for s in range(n):
                        if stride == 1:
                            for y in range(oh):
                                for xx in range(ow):
                                    accv[xx] += gout[s, o, y, xx] * xp[s, ci, y + ki, xx + kj]
                        else:
                            for y in range(oh):
                                for xx in range(ow):
                                    accv[xx] += gout[s, o, y, xx] * xp[s, ci, y * stride + ki, xx * stride + kj]
                    acc = 0.0
                    for xx in range(ow):
                        acc += accv[xx]
                    gw[o, ci, ki, kj] = acc
    for s in range(n):
        for ci in range(c):
            for o in range(co):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[o, ci, ki, kj]
                        if stride == 1:
                            for y in range(oh):
                                for xx in range(ow):
                                    gxp[s, ci, y + ki, xx + kj] += wv * gout[s, o, y, xx]
                        else:
                            for y in range(oh):
                                for xx in range(ow):
                                    gxp[s, ci, y * stride + ki, xx * stride + kj] += wv * gout[s, o, y, xx]
    return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd]), gw, gb


def conv2d_forward(x, w, b, stride, pad):
    return _conv_fwd(np.ascontiguousarray(x), np.ascontiguousarray(w),
                     np.ascontiguousarray(b), int(stride), int(pad))


def conv2d_backward(x, w, gout, stride, pad):
    return _conv_bwd(np.ascontiguousarray(x), np.ascontiguousarray(w),
                     np.ascontiguousarray(gout), int(stride), int(pad))


@njit(cache=True)
def _pool_fwd(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2))
    arg = np.empty((n, c, h // 2, w // 2), dtype=np.int64)
    for s in range(n):
        for ch in range(c):
            for y in range(h // 2):
                for xx in range(w // 2):
                    best = x[s, ch, 2 * y, 2 * xx]
                    bi = 2 * y * w + 2 * xx
                    for dy in range(2):
                        for dx in range(2):
                            v = x[s, ch, 2 * y + dy, 2 * xx + dx]
                            if v > best:
                                best = v
                                bi = (2 * y + dy) * w + 2 * xx + dx
                    out[s, ch, y, xx] = best
                    arg[s, ch, y, xx] = bi
    return out, arg


@njit(cache=True)
def _pool_bwd(arg, gout, h, w):
    n, c, oh, ow = gout.shape
    gx = np.zeros((n, c, h, w))
    for s in range(n):
        for ch in range(c):
            for y in range(oh):
                for xx in range(ow):
                    k = arg[s, ch, y, xx]
                    gx[s, ch, k // w, k % w] += gout[s, ch, y, xx]
    return gx


def maxpool2_forward(x):
    return _pool_fwd(np.ascontiguousarray(x))


def maxpool2_backward(argmax, gout, h, w):
    return _pool_bwd(np.ascontiguousarray(argmax), np.ascontiguousarray(gout), int(h), int(w))


@njit(cache=True)
def _min_filter(m, window):
    h, w = m.shape
    r = window // 2
    tmp = np.empty((h, w))
    out = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            best = np.inf
            for d in range(-r, r + 1):
                xx = min(max(x + d, 0), w - 1)
                if m[y, xx] < best:
                    best = m[y, xx]
            tmp[y, x] = best
    for y in range(h):
        for x in range(w):
            best = np.inf
            for d in range(-r, r + 1):
                yy = min(max(y + d, 0), h - 1)
                if tmp[yy, x] < best:
                    best = tmp[yy, x]
            out[y, x] = best
    return out


def min_filter2d(m, window):
    return _min_filter(np.ascontiguousarray(m, dtype=np.float64), int(window))


@njit(cache=True)
def _sqdist(a, b):
    n, d = a.shape
    m = b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                t = a[i, k] - b[j, k]
                acc += t * t
            out[i, j] = acc
    return out


def sqdist(a, b):
    """Exact pairwise squared distances, symmetric bit for bit."""
    return _sqdist(np.ascontiguousarray(a, dtype=np.float64),
                   np.ascontiguousarray(b, dtype=np.float64))
