"""Distribution-gap analysis: pooled features, MMD, exact t-SNE, threshold sweep."""

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import ParameterError
from .extractor import ps01_forward
from .rftm import init_rftm, residual_forward, residual_from_features
from .tensor import as_tensor

TAGS = ("HD_f", "HD_u", "HD_tu", "LD_f", "LD_u")


@dataclass
class FeatureCloud:
    vectors: np.ndarray  # (n, width)
    tag: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ParameterError("feature cloud must be an (n, width) array")

    def __len__(self):
        return len(self.vectors)

    def scaled(self, k):
        return FeatureCloud(self.vectors * k, self.tag)


def pool_feature_maps(f, tag):
    return FeatureCloud(np.asarray(f, dtype=np.float64).mean(axis=(2, 3)), tag)


def pool_features(x, w, p=None, tag=None, chunk=32):
    """Global-average-pooled stage-1 features; with ``p`` the RFTM path is used."""
    x = as_tensor(x)
    out = []
    for s in range(0, len(x), chunk):
        xb = x[s:s + chunk]
        f = ps01_forward(xb, w) if p is None else residual_forward(xb, w, p)
        out.append(f.astype(np.float64).mean(axis=(2, 3)))
    width = w.ps1.c_out
    vecs = np.concatenate(out) if out else np.zeros((0, width))
    return FeatureCloud(vecs, tag or ("HD_tu" if p is not None else "cloud"))


# -- MMD ------------------------------------------------------------------------

class Mmd(NamedTuple):
    value: float
    bandwidth: float
    degenerate: bool


def _vectors(c):
    return c.vectors if isinstance(c, FeatureCloud) else np.asarray(c, dtype=np.float64)


def median_bandwidth(*clouds):
    """Median pairwise Euclidean distance over the pooled points (0 if all coincide)."""
    z = np.concatenate([_vectors(c) for c in clouds])
    d = np.sqrt(kernels.sqdist(z, z)[np.triu_indices(len(z), k=1)])
    med = float(np.median(d))
    if med == 0.0 and np.any(d > 0):
        med = float(d[d > 0].mean())
    return med


def mmd2(x, y, bandwidth=None):
    """Unbiased squared MMD with a Gaussian kernel ``exp(-|a-b|^2 / (2 sigma^2))``.

    Equal-sized samples use the paired U-statistic (cross terms skip ``i == j``),
    so identical inputs give exactly zero; unequal sizes use the standard
    two-sample form. Sums are exactly rounded, which makes the result symmetric
    in ``x`` and ``y``. The median heuristic sets ``sigma`` when ``bandwidth``
    is None.
    """
    x, y = _vectors(x), _vectors(y)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ParameterError("MMD needs at least two points per sample")
    sigma = median_bandwidth(x, y) if bandwidth is None else float(bandwidth)
    if sigma <= 0.0:
        return Mmd(0.0, sigma, True)
    g = -0.5 / sigma ** 2
    kxx = np.exp(g * kernels.sqdist(x, x))
    kyy = np.exp(g * kernels.sqdist(y, y))
    kxy = np.exp(g * kernels.sqdist(x, y))
    sxx = math.fsum(kxx.ravel()) - math.fsum(np.diag(kxx))
    syy = math.fsum(kyy.ravel()) - math.fsum(np.diag(kyy))
    if m == n:
        sxy = math.fsum(kxy.ravel()) - math.fsum(np.diag(kxy))
        val = (sxx + syy - 2.0 * sxy) / (m * (m - 1))
    else:
        val = sxx / (m * (m - 1)) + syy / (n * (n - 1)) - 2.0 * math.fsum(kxy.ravel()) / (m * n)
    return Mmd(float(val), sigma, False)


def permutation_null(x, y, n_perm=200, seed=0, bandwidth=None):
    """MMD values after random relabelling of the pooled sample."""
    x, y = _vectors(x), _vectors(y)
    sigma = median_bandwidth(x, y) if bandwidth is None else bandwidth
    z = np.concatenate([x, y])
    rng = np.random.default_rng(seed)
    out = np.empty(n_perm)
    for k in range(n_perm):
        perm = rng.permutation(len(z))
        out[k] = mmd2(z[perm[:len(x)]], z[perm[len(x):]], sigma).value
    return out


def paired_margin_null(hd_u, hd_tu, hd_f, n_perm=200, seed=0, bandwidth=None):
    """Null distribution of ``MMD(u, f) - MMD(tu, f)`` under paired swaps.

    ``hd_tu[i]`` is the transferred version of ``hd_u[i]``. If transference had
    no effect on the gap, swapping the members of any pair would not change the
    margin in distribution; each permutation swaps every pair with prob. 1/2.
    """
    u, tu, f = _vectors(hd_u), _vectors(hd_tu), _vectors(hd_f)
    sigma = median_bandwidth(u, tu, f) if bandwidth is None else bandwidth
    rng = np.random.default_rng(seed)
    out = np.empty(n_perm)
    for k in range(n_perm):
        swap = rng.random(len(u)) < 0.5
        a = np.where(swap[:, None], tu, u)
        b = np.where(swap[:, None], u, tu)
        out[k] = mmd2(a, f, sigma).value - mmd2(b, f, sigma).value
    return out


# -- gap report -----------------------------------------------------------------

@dataclass
class GapReport:
    mmd_hd_u_f: float
    mmd_hd_tu_f: float
    mmd_ld_u_f: float
    bandwidth: float
    counts: dict = field(default_factory=dict)

    @property
    def gap_reduced(self):
        return self.mmd_hd_tu_f < self.mmd_hd_u_f

    @property
    def margin(self):
        return self.mmd_hd_u_f - self.mmd_hd_tu_f

    def to_text(self):
        rows = [("mmd_hd_u_f", self.mmd_hd_u_f), ("mmd_hd_tu_f", self.mmd_hd_tu_f),
                ("mmd_ld_u_f", self.mmd_ld_u_f), ("bandwidth", self.bandwidth),
                ("margin", self.margin)]
        rows += [(f"n_{k}", v) for k, v in self.counts.items()]
        rows.append(("gap_reduced", "yes" if self.gap_reduced else "no"))
        return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in rows)

    @classmethod
    def from_text(cls, text):
        kv = dict(line.split("=", 1) for line in text.splitlines() if line)
        counts = {k[2:]: int(v) for k, v in kv.items() if k.startswith("n_")}
        return cls(float(kv["mmd_hd_u_f"]), float(kv["mmd_hd_tu_f"]), float(kv["mmd_ld_u_f"]),
                   float(kv["bandwidth"]), counts)


def gap_report(hd_f, hd_u, hd_tu, ld_f, ld_u):
    """Three MMDs under one median-heuristic bandwidth taken over every cloud."""
    clouds = [c for c in (hd_f, hd_u, hd_tu, ld_f, ld_u) if len(c) > 0]
    sigma = median_bandwidth(*clouds)

    def gap(a, b):
        if len(a) < 2 or len(b) < 2:
            return float("nan")
        return mmd2(a, b, sigma).value if sigma > 0 else 0.0

    counts = {"HD_f": len(hd_f), "HD_u": len(hd_u), "HD_tu": len(hd_tu),
              "LD_f": len(ld_f), "LD_u": len(ld_u)}
    return GapReport(gap(hd_u, hd_f), gap(hd_tu, hd_f), gap(ld_u, ld_f), sigma, counts)


# -- exact t-SNE ------------------------------------------------------------------

class TsneResult(NamedTuple):
    embedding: np.ndarray
    kl: float
    kl_after_exaggeration: float


def _osum(a, axis=None):
    """Sum that depends only on the multiset of values, not their order."""
    if axis is None:
        return np.sort(a, axis=None).sum()
    return np.sort(a, axis=axis).sum(axis=axis)


def _calibrated_affinities(d2, perplexity, tol=1e-5, max_iter=100):
    """Row-conditional Gaussian affinities whose entropy matches log(perplexity)."""
    n = len(d2)
    target = math.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d2[i], i)
        di = di - di.min()
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            e = np.exp(-di * beta)
            s = _osum(e)
            H = math.log(s) + beta * float(_osum(di * e)) / s
            if abs(H - target) < tol:
                break
            if H > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        P[i, np.arange(n) != i] = e / s
    return P


def tsne_embed(x, perplexity=30.0, iterations=1000, seed=0, init=None, learning_rate=100.0,
               exaggeration=4.0, max_points=2000):
    """Exact t-SNE to two dimensions.

    Early exaggeration applies for the first quarter of the iterations with
    momentum 0.5, then momentum 0.8; per-parameter gains adapt as in the
    reference formulation. Returns the embedding and the KL objective at the
    end and at the end of the exaggeration phase.

    Every reduction is order-independent, so permuting the input points (and
    ``init`` alongside) permutes the embedding and changes nothing else.
    """
    x = _vectors(x)
    n = len(x)
    if n < 5:
        raise ParameterError("t-SNE needs at least 5 points")
    if n > max_points:
        raise ParameterError(f"exact t-SNE is limited to {max_points} points")
    if not 0 < perplexity < (n - 1) / 3:
        raise ParameterError(f"perplexity {perplexity} infeasible for {n} points")
    P = _calibrated_affinities(kernels.sqdist(x, x), perplexity)
    P = (P + P.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)
    np.fill_diagonal(P, 0.0)
    if init is None:
        Y = np.random.default_rng(seed).normal(0.0, 1e-4, size=(n, 2))
    else:
        Y = np.array(init, dtype=np.float64)
    vel = np.zeros_like(Y)
    gains = np.ones_like(Y)
    stop = iterations // 4
    kl_mid = float("nan")

    def objective(Y):
        num = 1.0 / (1.0 + kernels.sqdist(Y, Y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / _osum(num), 1e-12)
        mask = P > 0
        return float(_osum(P[mask] * np.log(P[mask] / Q[mask])))

    for it in range(iterations):
        ex = exaggeration if it < stop else 1.0
        mom = 0.5 if it < stop else 0.8
        num = 1.0 / (1.0 + kernels.sqdist(Y, Y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / _osum(num), 1e-12)
        W = (ex * P - Q) * num
        WY = np.stack([_osum(W * Y[:, k], axis=1) for k in range(2)], axis=1)
        grad = 4.0 * (_osum(W, axis=1)[:, None] * Y - WY)
        inc = np.sign(grad) != np.sign(vel)
        gains = np.where(inc, gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, 0.01)
        vel = mom * vel - learning_rate * gains * grad
        Y = Y + vel
        Y = Y - _osum(Y, axis=0) / n
        if it == stop - 1:
            kl_mid = objective(Y)
    return TsneResult(Y, objective(Y), kl_mid)


def write_embedding(path, points, tags, header="x\ty\ttag"):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {header}\n")
        for (a, b), t in zip(points, tags):
            fh.write(f"{float(a)!r}\t{float(b)!r}\t{t}\n")


def read_embedding(path):
    pts, tags = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            a, b, t = line.rstrip("\n").split("\t")
            pts.append((float(a), float(b)))
            tags.append(t)
    return np.array(pts), tags
