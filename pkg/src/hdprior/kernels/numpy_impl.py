"""Vectorised numpy kernels (im2col via sliding windows + tensordot)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

NAME = "numpy"


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _windows(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, w, b, stride, pad):
    kh, kw = w.shape[2], w.shape[3]
    win = _windows(x, kh, kw, stride, pad)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += b[None, :, None, None]
    return out


def conv2d_backward(x, w, gout, stride, pad):
    n, c, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = gout.shape[2], gout.shape[3]
    win = _windows(x, kh, kw, stride, pad)
    gw = np.tensordot(gout, win, axes=([0, 2, 3], [0, 2, 3]))
    gb = gout.sum(axis=(0, 2, 3))
    gcol = np.tensordot(gout, w, axes=([1], [0]))  # (n, oh, ow, c, kh, kw)
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                gcol[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    gx = np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd])
    return gx, gw, gb


def maxpool2_forward(x):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    k = blocks.argmax(axis=-1)  # first occurrence wins ties
    out = np.take_along_axis(blocks, k[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[:, None] + k // 2
    cols = 2 * np.arange(w // 2)[None, :] + k % 2
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.int64)


def maxpool2_backward(argmax, gout, h, w):
    n, c = gout.shape[:2]
    flat = np.zeros((n, c, h * w))
    idx = argmax.reshape(n, c, -1)
    np.put_along_axis(flat, idx, gout.reshape(n, c, -1), axis=-1)
    return flat.reshape(n, c, h, w)


def min_filter2d(m, window):
    return ndimage.minimum_filter(m, size=window, mode="nearest")


def sqdist(a, b):
    """Exact pairwise squared distances, symmetric bit for bit."""
    out = np.zeros((a.shape[0], b.shape[0]))
    for k in range(a.shape[1]):
        d = a[:, k, None] - b[None, :, k]
        out += d * d
    return out
