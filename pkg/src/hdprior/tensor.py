"""Dense NCHW tensors and the hand-differentiated layers built on them.

Tensors are plain ``numpy`` arrays of shape ``(n, c, h, w)``. Storage is
float32; reductions run in float64 inside the kernels. A float64 input is
kept in float64 end to end, which is what the finite-difference checks use.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError


def _dtype_of(*arrays):
    return np.float64 if any(a.dtype == np.float64 for a in arrays) else np.float32


def _store(arr, dtype):
    out = np.asarray(arr, dtype=dtype)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("operation produced non-finite values")
    return out


def as_tensor(a, ndim=4):
    """Coerce ``a`` to a float32 (or float64, if already so) array of ``ndim`` dims."""
    a = np.asarray(a)
    if a.dtype != np.float64:
        a = a.astype(np.float32, copy=False)
    if a.ndim != ndim:
        raise ShapeError(f"expected a {ndim}-d tensor, got shape {a.shape}")
    return a


@dataclass
class ConvParams:
    weight: np.ndarray  # (c_out, c_in, kh, kw)
    bias: np.ndarray    # (c_out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        self.bias = np.asarray(self.bias, dtype=self.weight.dtype)
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match c_out={self.weight.shape[0]}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @classmethod
    def same(cls, weight, bias):
        """Stride-1 convolution with shape-preserving zero padding."""
        weight = as_tensor(weight)
        kh, kw = weight.shape[2:]
        if kh != kw or kh % 2 == 0:
            raise ShapeError("shape-preserving padding needs a square, odd kernel")
        return cls(weight, bias, stride=1, padding=(kh - 1) // 2)

    @property
    def c_out(self):
        return self.weight.shape[0]

    @property
    def c_in(self):
        return self.weight.shape[1]

    def copy(self):
        return ConvParams(self.weight.copy(), self.bias.copy(), self.stride, self.padding)


def conv_output_dims(input_dims, p):
    n, c, h, w = input_dims
    kh, kw = p.weight.shape[2:]
    oh = (h + 2 * p.padding - kh) // p.stride + 1
    ow = (w + 2 * p.padding - kw) // p.stride + 1
    return n, p.c_out, oh, ow


def conv2d(x, p):
    """2-D cross-correlation with zero padding (no kernel flip)."""
    x = as_tensor(x)
    if x.shape[1] != p.c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {p.c_in}")
    dims = conv_output_dims(x.shape, p)
    if dims[2] < 1 or dims[3] < 1:
        raise ShapeError(f"kernel {p.weight.shape[2:]} does not fit input {x.shape[2:]}")
    out = kernels.conv2d_forward(x.astype(np.float64), p.weight.astype(np.float64),
                                 p.bias.astype(np.float64), p.stride, p.padding)
    return _store(out, _dtype_of(x, p.weight))


def conv2d_grad(x, p, grad_out):
    """Gradients of ``<grad_out, conv2d(x, p)>`` w.r.t. input, weights and bias."""
    x = as_tensor(x)
    grad_out = as_tensor(grad_out)
    if x.shape[1] != p.c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {p.c_in}")
    if grad_out.shape != conv_output_dims(x.shape, p):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != conv output {conv_output_dims(x.shape, p)}")
    gx, gw, gb = kernels.conv2d_backward(x.astype(np.float64), p.weight.astype(np.float64),
                                         grad_out.astype(np.float64), p.stride, p.padding)
    dt = _dtype_of(x, p.weight, grad_out)
    return _store(gx, dt), _store(gw, dt), _store(gb, dt)


def maxpool2(x):
    """2x2 stride-2 max pooling.

    Returns the pooled tensor and, per window, the flat ``y * w + x`` index of
    the winning input element within its channel plane. The first element in
    row-major window order wins ties.
    """
    x = as_tensor(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {x.shape[2:]}")
    out, arg = kernels.maxpool2_forward(x.astype(np.float64))
    return _store(out, x.dtype), arg


def maxpool2_grad(argmax, grad_out, input_dims):
    grad_out = as_tensor(grad_out)
    n, c, h, w = input_dims
    if grad_out.shape != (n, c, h // 2, w // 2) or argmax.shape != grad_out.shape:
        raise ShapeError(
            f"grad_out {grad_out.shape} / argmax {argmax.shape} do not match input {tuple(input_dims)}")
    gx = kernels.maxpool2_backward(argmax, grad_out.astype(np.float64), h, w)
    return _store(gx, grad_out.dtype)


def relu(x):
    x = as_tensor(x, ndim=np.ndim(x))
    return np.where(x > 0, x, x.dtype.type(0))


def relu_grad(x, grad_out):
    x = as_tensor(x, ndim=np.ndim(x))
    grad_out = np.asarray(grad_out)
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    return np.where(x > 0, grad_out, grad_out.dtype.type(0)).astype(_dtype_of(x, grad_out))


def add(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot add tensors of shapes {a.shape} and {b.shape}")
    return _store(a + b, _dtype_of(a, b))
