"""Frozen two-stage feature extractor standing in for a backbone's Stage0/Stage1.

Each stage is a 3x3 stride-1 conv (padding 1), ReLU, then 2x2 max pooling,
so every stage halves the spatial extent.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tnsr
from .errors import ParameterError, ShapeError, TrainingError
from .optim import (HeadParams, global_avg_pool, global_avg_pool_grad, head_backward,
                    head_forward, sgd_step, softmax_xent)
from .tensor import ConvParams, as_tensor, conv2d, conv2d_grad, maxpool2, maxpool2_grad, relu, relu_grad


@dataclass(frozen=True)
class ExtractorConfig:
    c_in: int = 3
    c0: int = 16
    c1: int = 32

    def __post_init__(self):
        if min(self.c_in, self.c0, self.c1) < 1:
            raise ParameterError("channel counts must be >= 1")


@dataclass
class ExtractorWeights:
    ps0: ConvParams
    ps1: ConvParams
    frozen: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def config(self):
        return ExtractorConfig(self.ps0.c_in, self.ps0.c_out, self.ps1.c_out)

    def digest(self):
        return params_digest(self.arrays())

    def arrays(self):
        return {"ps0.weight": self.ps0.weight, "ps0.bias": self.ps0.bias,
                "ps1.weight": self.ps1.weight, "ps1.bias": self.ps1.bias}


def params_digest(arrays):
    """SHA-256 over names, shapes and raw bytes of a dict of arrays."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def fan_in_conv(rng, c_out, c_in, k=3):
    std = np.sqrt(2.0 / (c_in * k * k))
    w = rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(np.float32)
    return ConvParams.same(w, np.zeros(c_out, np.float32))


def init_extractor(config=ExtractorConfig(), seed=0):
    rng = np.random.default_rng(seed)
    return ExtractorWeights(fan_in_conv(rng, config.c0, config.c_in),
                            fan_in_conv(rng, config.c1, config.c0))


def stage_forward(x, p):
    """conv -> ReLU -> maxpool; returns output and the cache for :func:`stage_backward`."""
    x = as_tensor(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"stage input needs even spatial extents, got {x.shape[2:]}")
    z = conv2d(x, p)
    out, arg = maxpool2(relu(z))
    return out, (x, z, arg)


def stage_backward(cache, p, grad_out):
    x, z, arg = cache
    g = relu_grad(z, maxpool2_grad(arg, grad_out, z.shape))
    return conv2d_grad(x, p, g)


def ps0_forward(x, w):
    return stage_forward(x, w.ps0)[0]


def ps1_forward(f, w):
    return stage_forward(f, w.ps1)[0]


def ps01_forward(x, w):
    return ps1_forward(ps0_forward(x, w), w)


def save_weights(path, w):
    tnsr.save(path, w.arrays())


def load_weights(path, frozen=True):
    e = tnsr.load(path)
    try:
        return ExtractorWeights(ConvParams.same(e["ps0.weight"], e["ps0.bias"]),
                                ConvParams.same(e["ps1.weight"], e["ps1.bias"]), frozen=frozen)
    except KeyError as exc:
        raise ParameterError(f"{path}: missing extractor entry {exc}") from None


def _rms(f):
    return float(np.sqrt(np.mean(np.square(f, dtype=np.float64))))


def rescale_stages(w, patches, chunk=64):
    """Fold a positive scalar into each stage so its output has unit RMS on ``patches``.

    ReLU and max-pooling commute with positive scaling, so this is a fixed
    normalisation baked into the weights, the way a frozen batch norm folds
    into the preceding conv.
    """
    x = as_tensor(patches)
    sq0 = sum(np.square(ps0_forward(x[s:s + chunk], w), dtype=np.float64).sum()
              for s in range(0, len(x), chunk))
    n0 = len(x) * w.ps0.c_out * (x.shape[2] // 2) * (x.shape[3] // 2)
    a = 1.0 / np.sqrt(sq0 / n0)
    sq1 = sum(np.square(ps01_forward(x[s:s + chunk], w), dtype=np.float64).sum()
              for s in range(0, len(x), chunk))
    n1 = len(x) * w.ps1.c_out * (x.shape[2] // 4) * (x.shape[3] // 4)
    b = 1.0 / np.sqrt(sq1 / n1)
    if not (np.isfinite(a) and np.isfinite(b)):
        raise TrainingError("extractor produced all-zero features; pretraining collapsed")
    ps0 = ConvParams(np.float32(a) * w.ps0.weight, np.float32(a) * w.ps0.bias,
                     w.ps0.stride, w.ps0.padding)
    ps1 = ConvParams(np.float32(b / a) * w.ps1.weight, np.float32(b) * w.ps1.bias,
                     w.ps1.stride, w.ps1.padding)
    meta = dict(w.meta, scale0=float(a), scale1=float(b))
    return ExtractorWeights(ps0, ps1, w.frozen, meta)


def pretrain_extractor(patches, labels, config=ExtractorConfig(), seed=0, iterations=300,
                       batch_size=16, lr=0.05, momentum=0.9):
    """Fit both stages on shape classification through a temporary GAP + linear head.

    ``patches`` is an ``(n, 3, h, w)`` array of clean patches and ``labels``
    their class ids. The head is discarded; the returned weights are frozen and
    carry the final held-in accuracy in ``meta["pretrain_accuracy"]``.
    Stage outputs are rescaled to unit RMS on ``patches`` before returning
    (see :func:`rescale_stages`).
    """
    x_all = as_tensor(patches)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ParameterError("pretraining needs at least two classes")
    n_cls = int(labels.max()) + 1
    w = init_extractor(config, seed)
    head = HeadParams.zeros(config.c1, n_cls)
    rng = np.random.default_rng(seed + 1)

    params = {"ps0.w": w.ps0.weight, "ps0.b": w.ps0.bias, "ps1.w": w.ps1.weight,
              "ps1.b": w.ps1.bias, "head.w": head.weight, "head.b": head.bias}
    state = {}
    for _ in range(iterations):
        idx = rng.integers(len(x_all), size=batch_size)
        f0, c0 = stage_forward(x_all[idx], w.ps0)
        f1, c1 = stage_forward(f0, w.ps1)
        pooled = global_avg_pool(f1)
        _, gl = softmax_xent(head_forward(pooled, head), labels[idx])
        ghw, ghb, gpool = head_backward(pooled, head, gl)
        g1 = global_avg_pool_grad(gpool, f1.shape).astype(np.float32)
        gf0, gw1, gb1 = stage_backward(c1, w.ps1, g1)
        _, gw0, gb0 = stage_backward(c0, w.ps0, gf0)
        grads = {"ps0.w": gw0, "ps0.b": gb0, "ps1.w": gw1, "ps1.b": gb1,
                 "head.w": ghw, "head.b": ghb}
        params, state = sgd_step(params, grads, state, lr, momentum)
        w.ps0.weight, w.ps0.bias = params["ps0.w"], params["ps0.b"]
        w.ps1.weight, w.ps1.bias = params["ps1.w"], params["ps1.b"]
        head.weight, head.bias = params["head.w"], params["head.b"]

    correct = 0
    for s in range(0, len(x_all), 64):
        logits = head_forward(global_avg_pool(ps01_forward(x_all[s:s + 64], w)), head)
        correct += int((logits.argmax(axis=1) == labels[s:s + 64]).sum())
    w = rescale_stages(w, x_all)
    w.frozen = True
    w.meta["pretrain_accuracy"] = correct / len(x_all)
    return w
