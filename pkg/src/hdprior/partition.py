"""Patch extraction, HD/LD partitioning by transmission, and the DFUI gate."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError

AGGREGATES = {"mean": np.mean, "min": np.min, "median": np.median}


@dataclass(frozen=True)
class Patch:
    image_id: str
    x: int
    y: int
    size: int
    mean_t: float  # window aggregate of t ("mean" unless configured otherwise)
    tag: str = "u"  # "u" underwater, "f" detector-friendly

    def window(self, arr):
        """Slice this patch's window out of a (..., h, w) array."""
        return arr[..., self.y:self.y + self.size, self.x:self.x + self.size]

    def to_line(self):
        return f"{self.image_id} {self.x} {self.y} {self.size} {self.mean_t!r} {self.tag}"

    @classmethod
    def from_line(cls, line):
        parts = line.split()
        if len(parts) != 6:
            raise FormatError(f"index line needs 6 fields: {line!r}")
        return cls(parts[0], int(parts[1]), int(parts[2]), int(parts[3]), float(parts[4]), parts[5])


@dataclass
class PatchSet:
    label: str  # "HD" or "LD"
    patches: list = field(default_factory=list)
    threshold: float = 0.5

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    def __getitem__(self, i):
        return self.patches[i]


@dataclass
class DfuiGate:
    scores: dict  # image id -> AP in [0, 100]
    threshold: float = 60.0

    def __post_init__(self):
        if self.threshold < 0:
            raise ParameterError("gate threshold must be >= 0")


def extract_patches(image, t, size=64, stride=64, image_id="", tag="u", aggregate="mean"):
    """All fully contained ``size`` windows on a ``stride`` grid, row-major."""
    h, w = np.shape(t)
    if np.shape(image)[-2:] != (h, w):
        raise ParameterError("image and transmission map sizes differ")
    if size < 1 or size > min(h, w):
        raise ParameterError(f"patch size {size} does not fit a {h}x{w} image")
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    agg = AGGREGATES[aggregate]
    t = np.asarray(t, dtype=np.float64)
    out = []
    for y in range(0, h - size + 1, stride):
        for x in range(0, w - size + 1, stride):
            out.append(Patch(image_id, x, y, size, float(agg(t[y:y + size, x:x + size])), tag))
    return out


def split_hd_ld(patches, T):
    """Strict rule: ``mean_t < T`` is heavily degraded, everything else lightly."""
    if not 0.0 <= T <= 1.0:
        raise ParameterError(f"threshold must lie in [0, 1], got {T}")
    hd = PatchSet("HD", [p for p in patches if p.mean_t < T], T)
    ld = PatchSet("LD", [p for p in patches if not p.mean_t < T], T)
    return hd, ld


def select_dfui(gate):
    """Image ids whose score reaches the gate threshold (inclusive), sorted."""
    if not gate.scores:
        raise ParameterError("DFUI score table is empty")
    keep = sorted(k for k, ap in gate.scores.items() if ap >= gate.threshold)
    if not keep:
        warnings.warn(f"no image reaches AP >= {gate.threshold}", stacklevel=2)
    return keep


def sample_pairs(hd_u, hd_f, count, seed):
    """``count`` (i, j) index pairs drawn uniformly with replacement."""
    if len(hd_u) == 0 or len(hd_f) == 0:
        raise ParameterError("cannot sample pairs from an empty patch set")
    rng = np.random.default_rng(seed)
    i = rng.integers(len(hd_u), size=count)
    j = rng.integers(len(hd_f), size=count)
    return [(int(a), int(b)) for a, b in zip(i, j)]


def read_scores(path):
    scores = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{n}: expected 'image_id<TAB>AP'")
            ap = float(parts[1])
            if not 0.0 <= ap <= 100.0:
                raise FormatError(f"{path}:{n}: AP {ap} outside [0, 100]")
            scores[parts[0]] = ap
    return scores


def write_scores(path, scores):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in scores.items():
            fh.write(f"{k}\t{v!r}\n")


def write_index(path, patches):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(p.to_line() + "\n" for p in patches)


def read_index(path):
    with open(path, encoding="utf-8") as fh:
        return [Patch.from_line(line) for line in fh if line.strip()]
