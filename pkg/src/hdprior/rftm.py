"""Residual feature transference module (RFTM) and the residual feed-forward.

The module maps shallow-stage features ``f0`` to a residual that is added to
the frozen intermediate-stage output::

    F_hat(x) = ps1(ps0(x)) + rftm(ps0(x))
    rftm     = maxpool2 -> conv -> ReLU -> conv -> ReLU -> conv

Only RFTM parameters receive gradients; the extractor is never touched.
"""

from dataclasses import dataclass

import numpy as np

from . import tnsr
from .errors import ParameterError, ShapeError, StateError
from .extractor import params_digest, ps0_forward, ps1_forward
from .tensor import ConvParams, add, as_tensor, conv2d, conv2d_grad, maxpool2, maxpool2_grad, relu, relu_grad

INIT_MODES = ("zero-residual", "random")


@dataclass
class RftmParams:
    convs: list  # ConvParams, applied in order; ReLU between all but the last

    @property
    def conv1(self):
        return self.convs[0]

    @property
    def conv2(self):
        return self.convs[1]

    @property
    def conv3(self):
        return self.convs[2]

    @property
    def c_in(self):
        return self.convs[0].c_in

    @property
    def c_out(self):
        return self.convs[-1].c_out

    def arrays(self):
        out = {}
        for k, c in enumerate(self.convs, 1):
            out[f"rftm.conv{k}.weight"] = c.weight
            out[f"rftm.conv{k}.bias"] = c.bias
        return out

    def with_arrays(self, arrays):
        """A copy whose weights/biases come from ``arrays`` (same naming as :meth:`arrays`)."""
        return RftmParams([ConvParams.same(arrays[f"rftm.conv{k}.weight"],
                                           arrays[f"rftm.conv{k}.bias"])
                           for k in range(1, len(self.convs) + 1)])

    def copy(self):
        return RftmParams([c.copy() for c in self.convs])

    def digest(self):
        return params_digest(self.arrays())

    def count(self):
        return sum(a.size for a in self.arrays().values())


def param_count(c0, cmid, c1, kernel=3):
    k2 = kernel * kernel
    return k2 * c0 * cmid + cmid + k2 * cmid * cmid + cmid + k2 * cmid * c1 + c1


def init_rftm(c0, c1, seed=0, mode="zero-residual", cmid=None, kernel=3, layers=3):
    """Seeded fan-in normal init; ``zero-residual`` zeroes the last conv."""
    if mode not in INIT_MODES:
        raise ParameterError(f"unknown RFTM init mode {mode!r}; expected one of {INIT_MODES}")
    if layers < 2 or kernel % 2 == 0:
        raise ParameterError("RFTM needs >= 2 layers and an odd kernel")
    cmid = c1 if cmid is None else cmid
    rng = np.random.default_rng(seed)
    chans = [c0] + [cmid] * (layers - 1) + [c1]
    convs = []
    for k in range(layers):
        ci, co = chans[k], chans[k + 1]
        std = np.sqrt(2.0 / (ci * kernel * kernel))
        w = rng.normal(0.0, std, size=(co, ci, kernel, kernel)).astype(np.float32)
        if k == layers - 1 and mode == "zero-residual":
            w = np.zeros_like(w)
        convs.append(ConvParams.same(w, np.zeros(co, np.float32)))
    return RftmParams(convs)


def save_rftm(path, p):
    tnsr.save(path, p.arrays())


def load_rftm(path):
    e = tnsr.load(path)
    n = sum(1 for k in e if k.startswith("rftm.conv") and k.endswith(".weight"))
    if n < 2:
        raise ParameterError(f"{path}: no RFTM conv entries")
    return RftmParams([ConvParams.same(e[f"rftm.conv{k}.weight"], e[f"rftm.conv{k}.bias"])
                       for k in range(1, n + 1)])


@dataclass
class RftmCache:
    digest: str
    in_dims: tuple
    pool_arg: np.ndarray
    inputs: list      # input to each conv
    pre_acts: list    # output of each conv before ReLU


def rftm_forward(f0, p, keep_cache=False):
    f0 = as_tensor(f0)
    if f0.shape[1] != p.c_in:
        raise ShapeError(f"RFTM expects {p.c_in} input channels, got {f0.shape[1]}")
    if f0.shape[2] % 2 or f0.shape[3] % 2:
        raise ShapeError(f"RFTM input needs even spatial extents, got {f0.shape[2:]}")
    h, arg = maxpool2(f0)
    inputs, pre = [], []
    last = len(p.convs) - 1
    for k, conv in enumerate(p.convs):
        inputs.append(h)
        z = conv2d(h, conv)
        pre.append(z)
        h = z if k == last else relu(z)
    if not keep_cache:
        return h
    return h, RftmCache(p.digest(), f0.shape, arg, inputs, pre)


def rftm_backward(cache, grad, p):
    """Gradients of ``<grad, rftm(f0)>`` for every RFTM weight and bias."""
    if cache.digest != p.digest():
        raise StateError("RFTM parameters changed since the cached forward pass")
    grad = as_tensor(grad)
    if grad.shape != cache.pre_acts[-1].shape:
        raise StateError(f"gradient shape {grad.shape} does not match cached output "
                         f"{cache.pre_acts[-1].shape}")
    grads = {}
    g = grad
    for k in range(len(p.convs) - 1, -1, -1):
        if k != len(p.convs) - 1:
            g = relu_grad(cache.pre_acts[k], g)
        g, gw, gb = conv2d_grad(cache.inputs[k], p.convs[k], g)
        grads[f"rftm.conv{k + 1}.weight"] = gw
        grads[f"rftm.conv{k + 1}.bias"] = gb
    return grads


def grad_wrt_f0(cache, grad, p):
    """Gradient of ``<grad, rftm(f0)>`` w.r.t. the RFTM input (used by checks only)."""
    g = as_tensor(grad)
    for k in range(len(p.convs) - 1, -1, -1):
        if k != len(p.convs) - 1:
            g = relu_grad(cache.pre_acts[k], g)
        g = conv2d_grad(cache.inputs[k], p.convs[k], g)[0]
    return maxpool2_grad(cache.pool_arg, g, cache.in_dims)


def residual_from_features(f0, f1, p, keep_cache=False):
    """``f1 + rftm(f0)`` for precomputed frozen-stage features."""
    if keep_cache:
        d, cache = rftm_forward(f0, p, keep_cache=True)
        return add(f1, d), cache
    return add(f1, rftm_forward(f0, p))


def residual_forward(x, w, p, keep_cache=False):
    """Transferred stage-1 features ``ps1(ps0(x)) + rftm(ps0(x))``; ps0 runs once."""
    f0 = ps0_forward(x, w)
    return residual_from_features(f0, ps1_forward(f0, w), p, keep_cache)
