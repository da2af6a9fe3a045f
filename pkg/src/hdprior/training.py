"""Stage-1 transference training (KL loss) and stage-2 frozen-RFTM finetuning."""

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError, TrainingError
from .extractor import ExtractorWeights, params_digest, ps0_forward, ps1_forward
from .optim import (HeadParams, global_avg_pool, global_avg_pool_grad, head_backward,
                    head_forward, sgd_step, softmax_xent)
from .partition import sample_pairs
from .rftm import RftmParams, residual_from_features, rftm_backward
from .tensor import ConvParams, as_tensor, conv2d, conv2d_grad, relu, relu_grad

__all__ = ["TrainConfig", "TrainReport", "kl_loss", "train_rftm", "finetune", "sgd_step",
           "stage_features", "smoothed", "identity_fs"]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.002
    batch_size: int = 2
    momentum: float = 0.9
    stage1_iters: int = 500
    stage2_iters: int = 300
    finetune_lr: float = 0.05
    finetune_batch: int = 16
    held_out_fraction: float = 0.3
    seed: int = 0
    kl_eps: float = 1e-8
    temperature: float = 1.0
    diverge_factor: float = 10.0
    diverge_patience: int = 50
    check_every: int = 100

    def __post_init__(self):
        if self.lr <= 0 or self.finetune_lr <= 0:
            raise ParameterError("learning rates must be > 0")
        if self.batch_size < 1 or self.finetune_batch < 1:
            raise ParameterError("batch sizes must be >= 1")
        if self.kl_eps <= 0 or self.temperature <= 0:
            raise ParameterError("kl_eps and temperature must be > 0")


@dataclass
class TrainReport:
    stage: str
    losses: list = field(default_factory=list)
    seed: int = 0
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    wall_clock: float = 0.0  # kept out of the written file so reruns are byte-identical

    @property
    def initial_loss(self):
        return self.losses[0] if self.losses else float("nan")

    @property
    def final_loss(self):
        return self.losses[-1] if self.losses else float("nan")

    def summary(self):
        out = {"stage": self.stage, "iterations": len(self.losses), "seed": self.seed,
               "initial_loss": self.initial_loss, "final_loss": self.final_loss}
        out.update({f"config.{k}": v for k, v in self.config.items()})
        out.update(self.metrics)
        return out

    def to_text(self):
        lines = [f"{k}\t{v!r}" for k, v in enumerate(self.losses)]
        lines.append("")
        lines += [f"{k}={_fmt(v)}" for k, v in self.summary().items()]
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        head, _, tail = text.partition("\n\n")
        losses = [float(l.split("\t")[1]) for l in head.splitlines() if l]
        summary = {}
        for line in tail.splitlines():
            k, _, v = line.partition("=")
            summary[k] = _parse(v)
        rep = cls(summary.pop("stage"), losses, int(summary.pop("seed")))
        for k in ("iterations", "initial_loss", "final_loss"):
            summary.pop(k)
        rep.config = {k[7:]: v for k, v in summary.items() if k.startswith("config.")}
        rep.metrics = {k: v for k, v in summary.items() if not k.startswith("config.")}
        return rep


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def _parse(v):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def smoothed(trace, window=50):
    """Means of the first and last ``window`` entries of a loss trace."""
    trace = np.asarray(trace, dtype=np.float64)
    window = min(window, len(trace))
    return float(trace[:window].mean()), float(trace[-window:].mean())


def kl_loss(target, transferred, eps=1e-8, temperature=1.0):
    """KL(p || q) between per-sample softmax distributions, averaged over samples.

    ``p = softmax(target / temperature)`` and ``q = softmax(transferred /
    temperature)`` over all C*H*W elements of each sample; ``log q`` is floored
    at ``log(eps)``. Returns the loss in nats and its gradient with respect to
    ``transferred``; the target side receives no gradient.
    """
    target = np.asarray(target)
    transferred = np.asarray(transferred)
    if target.shape != transferred.shape:
        raise ShapeError(f"KL operands differ in shape: {target.shape} vs {transferred.shape}")
    if not (np.all(np.isfinite(target)) and np.all(np.isfinite(transferred))):
        raise ValueError("KL loss received non-finite features")
    n = target.shape[0]
    zp = target.reshape(n, -1).astype(np.float64) / temperature
    zq = transferred.reshape(n, -1).astype(np.float64) / temperature
    logp = zp - zp.max(axis=1, keepdims=True)
    logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
    logq = zq - zq.max(axis=1, keepdims=True)
    logq -= np.log(np.exp(logq).sum(axis=1, keepdims=True))
    live = logq >= np.log(eps)
    p = np.exp(logp)
    q = np.exp(logq)
    loss = (p * (logp - np.where(live, logq, np.log(eps)))).sum(axis=1).mean()
    pm = p * live
    g = (-pm + q * pm.sum(axis=1, keepdims=True)) / (n * temperature)
    return float(loss), g.reshape(transferred.shape).astype(transferred.dtype)


def stage_features(x, w, chunk=32):
    """Frozen ``(ps0(x), ps1(ps0(x)))`` computed in chunks."""
    x = as_tensor(x)
    f0s, f1s = [], []
    for s in range(0, len(x), chunk):
        f0 = ps0_forward(x[s:s + chunk], w)
        f0s.append(f0)
        f1s.append(ps1_forward(f0, w))
    return np.concatenate(f0s), np.concatenate(f1s)


def train_rftm(hd_u, hd_f, w, p0, cfg=TrainConfig(), features=None):
    """Unsupervised stage-1 training of the RFTM on unpaired HD patches.

    ``hd_u``/``hd_f`` are ``(n, 3, h, w)`` patch arrays. Each iteration draws
    ``batch_size`` random (i, j) pairs, compares ``F_hat(hd_u[i])`` with the
    frozen ``F(hd_f[j])`` through :func:`kl_loss` and takes one SGD-momentum
    step on the RFTM parameters only. ``features`` may carry precomputed
    ``(f0_u, f1_u, f1_f)`` to skip the frozen stages.
    """
    if len(hd_u) == 0 or len(hd_f) == 0:
        raise ParameterError("stage-1 training needs non-empty HD_u and HD_f sets")
    if not w.frozen:
        raise TrainingError("extractor weights must be frozen before transference training")
    t0 = time.perf_counter()
    w_digest = w.digest()
    if features is None:
        f0_u, f1_u = stage_features(hd_u, w)
        f1_f = stage_features(hd_f, w)[1]
    else:
        f0_u, f1_u, f1_f = features
    pairs = np.array(sample_pairs(range(len(f0_u)), range(len(f1_f)),
                                  cfg.stage1_iters * cfg.batch_size, cfg.seed)).reshape(-1, cfg.batch_size, 2)
    p = p0.copy()
    params, state = p.arrays(), {}
    report = TrainReport("transfer", seed=cfg.seed, config=asdict(cfg))
    over = 0
    for it in range(cfg.stage1_iters):
        i, j = pairs[it, :, 0], pairs[it, :, 1]
        fhat, cache = residual_from_features(f0_u[i], f1_u[i], p, keep_cache=True)
        loss, g = kl_loss(f1_f[j], fhat, cfg.kl_eps, cfg.temperature)
        if not np.isfinite(loss):
            raise TrainingError(f"stage-1 loss became non-finite at iteration {it}")
        report.losses.append(loss)
        over = over + 1 if loss > cfg.diverge_factor * report.losses[0] else 0
        if over >= cfg.diverge_patience:
            raise TrainingError(f"stage-1 diverged: loss above {cfg.diverge_factor}x initial "
                                f"for {over} iterations (iteration {it})")
        params, state = sgd_step(params, rftm_backward(cache, g, p), state, cfg.lr, cfg.momentum)
        p = p.with_arrays(params)
        if (it + 1) % cfg.check_every == 0 and w.digest() != w_digest:
            raise TrainingError(f"extractor weights changed during stage 1 (iteration {it})")
    if w.digest() != w_digest:
        raise TrainingError("extractor weights changed during stage 1")
    first, last = smoothed(report.losses) if report.losses else (float("nan"),) * 2
    report.metrics.update({"smoothed_initial": first, "smoothed_final": last})
    report.wall_clock = time.perf_counter() - t0
    return p, report


def identity_fs(c):
    """A 3x3 conv that passes its input through unchanged."""
    wgt = np.zeros((c, c, 3, 3), np.float32)
    wgt[np.arange(c), np.arange(c), 1, 1] = 1.0
    return ConvParams.same(wgt, np.zeros(c, np.float32))


def _fs_logits(fhat, fs, head, keep=False):
    z = conv2d(fhat, fs)
    a = relu(z)
    pooled = global_avg_pool(a)
    logits = head_forward(pooled, head)
    return (logits, (z, a, pooled)) if keep else logits


def finetune(x, labels, w, p, cfg=TrainConfig(), fs=None, head=None, n_classes=None,
             features=None):
    """Stage 2: train a finetune stage (3x3 conv + ReLU) and a linear head.

    PS0/PS1 and the RFTM stay frozen. The labelled patches are split with
    ``cfg.seed`` into train and held-out parts (``cfg.held_out_fraction``);
    the report carries both accuracies. ``features`` may carry precomputed
    ``(f0, f1)`` for ``x``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if np.unique(labels).size < 2:
        raise ParameterError("finetuning needs at least two classes")
    t0 = time.perf_counter()
    digests = (w.digest(), p.digest())
    c1 = p.c_out
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    fs = identity_fs(c1) if fs is None else fs.copy()
    head = HeadParams.zeros(c1, n_classes) if head is None else HeadParams(head.weight.copy(), head.bias.copy())

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(labels))
    n_test = max(1, int(round(cfg.held_out_fraction * len(labels))))
    test, train = order[:n_test], order[n_test:]
    f0, f1 = stage_features(x, w) if features is None else features
    fhat = residual_from_features(f0, f1, p)

    params = {"fs.w": fs.weight, "fs.b": fs.bias, "head.w": head.weight, "head.b": head.bias}
    state = {}
    report = TrainReport("finetune", seed=cfg.seed, config=asdict(cfg))
    batches = rng.integers(len(train), size=(cfg.stage2_iters, cfg.finetune_batch))
    for it in range(cfg.stage2_iters):
        idx = train[batches[it]]
        logits, (z, a, pooled) = _fs_logits(fhat[idx], fs, head, keep=True)
        loss, gl = softmax_xent(logits, labels[idx])
        if not np.isfinite(loss):
            raise TrainingError(f"stage-2 loss became non-finite at iteration {it}")
        report.losses.append(loss)
        ghw, ghb, gpool = head_backward(pooled, head, gl)
        ga = global_avg_pool_grad(gpool, a.shape).astype(np.float32)
        _, gfw, gfb = conv2d_grad(fhat[idx], fs, relu_grad(z, ga))
        params, state = sgd_step(params, {"fs.w": gfw, "fs.b": gfb, "head.w": ghw, "head.b": ghb},
                                 state, cfg.finetune_lr, cfg.momentum)
        fs = ConvParams.same(params["fs.w"], params["fs.b"])
        head = HeadParams(params["head.w"], params["head.b"])
    if (w.digest(), p.digest()) != digests:
        raise TrainingError("frozen extractor/RFTM weights changed during finetuning")

    def accuracy(ids):
        if len(ids) == 0:
            return float("nan")
        return float((_fs_logits(fhat[ids], fs, head).argmax(axis=1) == labels[ids]).mean())

    report.metrics.update({"train_accuracy": accuracy(train), "held_out_accuracy": accuracy(test),
                           "n_train": len(train), "n_held_out": len(test)})
    report.wall_clock = time.perf_counter() - t0
    return fs, head, report
