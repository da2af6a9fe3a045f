"""SGD with momentum and the softmax classification head shared by both trainers."""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


def sgd_step(params, grads, state, lr, momentum):
    """``v <- momentum*v + g``; ``theta <- theta - lr*v`` for every named array.

    ``params``, ``grads`` and ``state`` are dicts keyed by parameter name;
    missing velocities start at zero. Returns new ``(params, state)`` dicts.
    """
    new_p, new_s = {}, {}
    for name, theta in params.items():
        g = np.asarray(grads[name])
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, param {theta.shape}")
        v = state.get(name)
        v = g.astype(np.float64) if v is None else momentum * v.astype(np.float64) + g
        new_s[name] = v.astype(theta.dtype)
        new_p[name] = (theta.astype(np.float64) - lr * v).astype(theta.dtype)
    return new_p, new_s


@dataclass
class HeadParams:
    weight: np.ndarray  # (classes, width)
    bias: np.ndarray    # (classes,)

    @classmethod
    def zeros(cls, width, classes):
        return cls(np.zeros((classes, width), np.float32), np.zeros(classes, np.float32))

    @property
    def width(self):
        return self.weight.shape[1]


def global_avg_pool(f):
    return f.astype(np.float64).mean(axis=(2, 3))


def global_avg_pool_grad(g, dims):
    n, c, h, w = dims
    return np.broadcast_to((g / (h * w))[:, :, None, None], dims).copy()


def head_forward(pooled, head):
    if pooled.shape[1] != head.width:
        raise ShapeError(f"head expects width {head.width}, got {pooled.shape[1]}")
    return pooled @ head.weight.astype(np.float64).T + head.bias


def softmax_xent(logits, labels):
    """Mean cross-entropy (nats) and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


def head_backward(pooled, head, glogits):
    """Gradients for head weight/bias and for the pooled input."""
    return glogits.T @ pooled, glogits.sum(axis=0), glogits @ head.weight.astype(np.float64)
