"""Underwater image formation, UDCP-style estimation and synthetic scenes.

Images are float32 arrays shaped ``(3, h, w)`` in RGB order with values in
``[0, 1]``; transmission maps are ``(h, w)``; an airlight is three per-channel
values floored at :data:`AIRLIGHT_FLOOR`.
"""

import re
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import FormatError, ParameterError, ShapeError

AIRLIGHT_FLOOR = 0.05
GB = slice(1, 3)  # the green and blue channels used by the underwater dark channel

SHAPE_NAMES = ("disk", "square", "triangle", "cross", "ring", "diamond")
CLASS_COLORS = np.array([[0.95, 0.55, 0.45], [0.55, 0.95, 0.50], [0.50, 0.60, 0.95],
                         [0.95, 0.90, 0.50], [0.90, 0.55, 0.90], [0.60, 0.90, 0.90]])


@dataclass(frozen=True)
class SceneLabel:
    class_id: int
    x: int
    y: int
    w: int
    h: int

    def to_line(self):
        return f"{self.class_id} {self.x} {self.y} {self.w} {self.h}"

    @classmethod
    def from_line(cls, line):
        parts = line.split()
        if len(parts) != 5:
            raise FormatError(f"label line needs 5 fields: {line!r}")
        return cls(*(int(p) for p in parts))


def as_image(img):
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"image must be (3, h, w), got {img.shape}")
    return img


def as_airlight(a):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise ShapeError(f"airlight needs 3 channels, got {a.shape}")
    return np.clip(a, AIRLIGHT_FLOOR, 1.0)


def _check_window(window):
    if int(window) != window or window < 1 or window % 2 == 0:
        raise ParameterError(f"window must be a positive odd integer, got {window}")
    return int(window)


def degrade(J, t, A):
    """Apply ``I = J*t + A*(1-t)`` per pixel and channel."""
    J = as_image(J)
    t = np.asarray(t, dtype=np.float64)
    if t.shape != J.shape[1:]:
        raise ShapeError(f"transmission {t.shape} does not match image {J.shape[1:]}")
    A = as_airlight(A)[:, None, None]
    I = J.astype(np.float64) * t + A * (1.0 - t)
    return np.clip(I, 0.0, 1.0).astype(np.float32)


def underwater_dark_channel(I, window):
    """Windowed minimum over the G and B channels, borders replicated."""
    window = _check_window(window)
    I = as_image(I)
    return kernels.min_filter2d(I[GB].astype(np.float64).min(axis=0), window)


def estimate_airlight(I, window):
    """Image colour at the brightest underwater-dark-channel pixel."""
    I = as_image(I)
    dc = underwater_dark_channel(I, window)
    y, x = np.unravel_index(np.argmax(dc), dc.shape)
    return as_airlight(I[:, y, x])


def estimate_transmission(I, A, window, omega=0.95):
    """``t = 1 - omega * min_window min_{G,B} I_c / A_c``, clamped to [0, 1]."""
    window = _check_window(window)
    if not 0.0 < omega <= 1.0:
        raise ParameterError(f"omega must lie in (0, 1], got {omega}")
    I = as_image(I)
    A = as_airlight(A)
    ratio = (I[GB].astype(np.float64) / A[GB, None, None]).min(axis=0)
    dc = kernels.min_filter2d(ratio, window)
    return np.clip(1.0 - omega * dc, 0.0, 1.0)


# -- synthetic corpora -------------------------------------------------------

def _smooth_field(rng, h, w, cells):
    """Random values on a coarse grid, bilinearly upsampled to (h, w)."""
    grid = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0.0, cells, h)
    xs = np.linspace(0.0, cells, w)
    rows = np.stack([np.interp(xs, np.arange(cells + 1), g) for g in grid])
    return np.stack([np.interp(ys, np.arange(cells + 1), rows[:, j]) for j in range(w)], axis=1)


def _shape_mask(cls, h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    name = SHAPE_NAMES[cls % len(SHAPE_NAMES)]
    if name == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if name == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if name == "triangle":
        # apex up, base at cy + r/2
        return (dy <= 0.6 * r) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.62)
    if name == "cross":
        arm = 0.3 * r
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if name == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    return np.abs(dy) + np.abs(dx) <= r


def synth_scene(seed, h, w, class_count, dark_fraction=0.3, cell=64, dark_stride=None,
                color_jitter=0.05):
    """Deterministic clean scene with 1-4 labelled shapes.

    The image is split into ``cell``-sized grid cells and each shape sits fully
    inside its own cell, so a patch grid with the same pitch sees at most one
    shape per patch. Each class has its own base colour (``CLASS_COLORS``),
    jittered by ``color_jitter``. A random ``dark_fraction`` of pixels (and, if
    ``dark_stride`` is set, every pixel on that lattice) gets a zero G or B
    value so the underwater dark channel of the clean scene is near zero.
    """
    if h < 32 or w < 32:
        raise ParameterError("scene must be at least 32x32")
    if not 1 <= class_count <= len(SHAPE_NAMES):
        raise ParameterError(f"class_count must be in [1, {len(SHAPE_NAMES)}]")
    rng = np.random.default_rng(seed)
    cell = min(cell, h, w)
    img = np.stack([0.12 + 0.35 * _smooth_field(rng, h, w, 4) for _ in range(3)])
    img += rng.normal(0.0, 0.03, size=img.shape)

    gy, gx = h // cell, w // cell
    n_shapes = int(rng.integers(1, min(4, gy * gx) + 1))
    chosen = rng.choice(gy * gx, size=n_shapes, replace=False)
    labels = []
    for k in chosen:
        cls = int(rng.integers(class_count))
        r = cell * rng.uniform(0.26, 0.38)
        top, left = (k // gx) * cell, (k % gx) * cell
        margin = r + 1
        cy = top + rng.uniform(margin, cell - margin)
        cx = left + rng.uniform(margin, cell - margin)
        mask = _shape_mask(cls, h, w, cy, cx, r)
        color = np.clip(CLASS_COLORS[cls] + rng.normal(0.0, color_jitter, 3), 0.0, 1.0)
        img[:, mask] = color[:, None] + rng.normal(0.0, 0.02, size=(3, int(mask.sum())))
        ys, xs = np.nonzero(mask)
        labels.append(SceneLabel(cls, int(xs.min()), int(ys.min()),
                                 int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)))

    dark = rng.random((h, w)) < dark_fraction
    if dark_stride:
        dark[::dark_stride, ::dark_stride] = True
    which = np.where(img[1] <= img[2], 1, 2)
    for c in (1, 2):
        img[c][dark & (which == c)] = 0.0
    labels.sort(key=lambda l: (l.y, l.x))
    return np.clip(img, 0.0, 1.0).astype(np.float32), labels


def synth_transmission(seed, h, w, t_low, t_high, cells=3):
    """Smooth random transmission field spanning exactly ``[t_low, t_high]``."""
    if not 0.0 <= t_low <= t_high <= 1.0:
        raise ParameterError(f"need 0 <= t_low <= t_high <= 1, got {t_low}, {t_high}")
    if t_low == t_high:
        return np.full((h, w), t_low, dtype=np.float64)
    rng = np.random.default_rng(seed)
    f = _smooth_field(rng, h, w, cells)
    f = (f - f.min()) / (f.max() - f.min())
    return np.clip(t_low + (t_high - t_low) * f, t_low, t_high)


# -- file formats --------------------------------------------------------------

_PPM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def ppm_bytes(img):
    img = as_image(img)
    h, w = img.shape[1:]
    px = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + px.transpose(1, 2, 0).tobytes()


def parse_ppm(buf):
    pos = 0
    fields = []
    for _ in range(4):
        m = _PPM_TOKEN.match(buf, pos)
        if m is None:
            raise FormatError("truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {fields[0][:8]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError("non-integer PPM header field") from None
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError(f"unsupported PPM geometry {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    data = buf[pos:pos + 3 * w * h]
    if len(data) != 3 * w * h:
        raise FormatError("truncated PPM raster")
    px = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return (px.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def write_ppm(path, img):
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(img))


def read_ppm(path):
    with open(path, "rb") as fh:
        return parse_ppm(fh.read())


def write_labels(path, labels):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(l.to_line() + "\n" for l in labels)


def read_labels(path):
    with open(path, encoding="utf-8") as fh:
        return [SceneLabel.from_line(line) for line in fh if line.strip()]
