"""Procedural multi-class counting scenes with dot-level ground truth.

Each sample is a single-channel image of simple solid shapes over low-amplitude
clutter, one dot per object at its centroid, a Gaussian density map whose mass
equals the object count, and a binary occupation mask.  Generation is a pure
function of (class spec, seed, H, W), so datasets are fully reproducible from
a handful of integers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

SHAPE_KINDS = ("disk", "square", "triangle", "cross", "ring", "diamond")

DEFAULT_SIGMA = 4.0
DEFAULT_DELTA = 1e-3


@dataclass(frozen=True)
class ClassSpec:
    """Rendering recipe for one object class; class 0 is the empty background."""

    class_id: int
    shape_kind: str
    size_range: tuple[float, float] = (6.0, 12.0)
    intensity_range: tuple[float, float] = (0.55, 0.95)
    count_range: tuple[int, int] = (3, 9)

    def __post_init__(self):
        if self.shape_kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape_kind {self.shape_kind!r}")
        if self.class_id < 0:
            raise ValueError("class_id must be >= 0")
        if self.class_id == 0 and self.count_range != (0, 0):
            raise ValueError("background class must have count_range (0, 0)")
        if self.class_id > 0 and self.count_range[0] < 1:
            raise ValueError("countable classes need count_range min >= 1")
        if self.count_range[0] > self.count_range[1]:
            raise ValueError("empty count_range")


@dataclass
class Sample:
    """One scene with its annotations and derived supervision targets.

    dots is None for samples restored from disk, where only the count
    survives; n_dots is authoritative either way.
    """

    image: Tensor
    dots: list[tuple[float, float]] | None
    class_id: int
    density: Tensor
    mask: Tensor
    seed: int
    n_dots: int

    def __post_init__(self):
        if self.dots is not None and len(self.dots) != self.n_dots:
            raise ValueError("n_dots disagrees with dot list")


@dataclass
class StageDataset:
    """Splits for one incremental stage (the stage's class, plus any merged-in
    background samples in stage 1)."""

    class_id: int
    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)


@dataclass(frozen=True)
class SplitSizes:
    train: int
    val: int
    test: int


# ---------------------------------------------------------------------------
# shape rendering

def _shape_sdf(kind, dy, dx, r):
    """Signed distance (negative inside) from pixel offsets to a shape of
    radius r centered at the origin.  Orientations are fixed so square and
    diamond stay distinguishable."""
    if kind == "disk":
        return np.hypot(dy, dx) - r
    if kind == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) - r * 0.82
    if kind == "diamond":
        return (np.abs(dy) + np.abs(dx)) - r * 1.15
    if kind == "ring":
        return np.abs(np.hypot(dy, dx) - 0.72 * r) - 0.30 * r
    if kind == "cross":
        arm = r * 0.34
        horiz = np.maximum(np.abs(dx) - r, np.abs(dy) - arm)
        vert = np.maximum(np.abs(dx) - arm, np.abs(dy) - r)
        return np.minimum(horiz, vert)
    if kind == "triangle":
        # point-up triangle as the max of three half-plane distances
        verts = [(-r, 0.0), (r * 0.5, -r * 0.866), (r * 0.5, r * 0.866)]
        d = None
        for i in range(3):
            ay, ax = verts[i]
            by, bx = verts[(i + 1) % 3]
            ey, ex = by - ay, bx - ax
            # outward normal of edge a->b for counter-clockwise vertex order
            ny, nx = ex, -ey
            nn = math.hypot(ny, nx)
            dist = ((dy - ay) * ny + (dx - ax) * nx) / nn
            d = dist if d is None else np.maximum(d, dist)
        return d
    raise ValueError(f"unknown shape_kind {kind!r}")


def _render_shape(canvas, kind, cy, cx, r, intensity):
    yy, xx = np.mgrid[0:canvas.shape[0], 0:canvas.shape[1]]
    sdf = _shape_sdf(kind, yy - cy, xx - cx, r)
    layer = intensity * np.clip(0.5 - sdf, 0.0, 1.0)
    np.maximum(canvas, layer, out=canvas)


def _value_noise(rng, H, W, cells=8, amplitude=0.1):
    """Bilinearly upsampled random grid, the usual cheap clutter texture."""
    g = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0.0, cells, H)
    xs = np.linspace(0.0, cells, W)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = g[np.ix_(y0, x0)]
    tr = g[np.ix_(y0, x0 + 1)]
    bl = g[np.ix_(y0 + 1, x0)]
    br = g[np.ix_(y0 + 1, x0 + 1)]
    return amplitude * ((1 - fy) * ((1 - fx) * tl + fx * tr) + fy * ((1 - fx) * bl + fx * br))


def _distractor_blob(rng, H, W):
    """Soft anisotropic bump; deliberately unlike every crisp class shape."""
    cy = rng.uniform(4, H - 4)
    cx = rng.uniform(4, W - 4)
    sy = rng.uniform(2.0, 6.0)
    sx = rng.uniform(2.0, 6.0)
    amp = rng.uniform(0.10, 0.30)
    yy, xx = np.mgrid[0:H, 0:W]
    return amp * np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2) / 2.0)


def generate_sample(cls: ClassSpec, seed: int, H: int = 64, W: int = 64,
                    sigma: float = DEFAULT_SIGMA, delta: float = DEFAULT_DELTA) -> Sample:
    """Deterministically render one scene for (cls, seed, H, W)."""
    if H < 32 or W < 32:
        raise ValueError(f"image size ({H},{W}) below the 32-pixel minimum")
    rng = np.random.default_rng([int(cls.class_id), int(seed) & (2**63 - 1), int(H), int(W)])

    count = int(rng.integers(cls.count_range[0], cls.count_range[1] + 1))
    canvas = np.zeros((H, W), dtype=np.float64)
    clutter = _value_noise(rng, H, W, amplitude=rng.uniform(0.05, 0.15))
    for _ in range(int(rng.integers(0, 4))):
        clutter = np.maximum(clutter, _distractor_blob(rng, H, W))
    np.maximum(canvas, clutter, out=canvas)

    dots = []
    for _ in range(count):
        size = rng.uniform(*cls.size_range)
        r = size / 2.0
        margin = r + 1.5
        cy = rng.uniform(margin, H - 1 - margin)
        cx = rng.uniform(margin, W - 1 - margin)
        intensity = rng.uniform(*cls.intensity_range)
        _render_shape(canvas, cls.shape_kind, cy, cx, r, intensity)
        dots.append((cy, cx))

    image = np.clip(canvas, 0.0, 1.0)[None]
    density = density_map(dots, sigma, H, W)
    mask = binary_mask(density, delta)
    return Sample(image=Tensor(image), dots=dots, class_id=cls.class_id,
                  density=density, mask=mask, seed=int(seed), n_dots=count)


# ---------------------------------------------------------------------------
# ground truth

def density_map(dots, sigma: float, H: int, W: int) -> Tensor:
    """Sum of per-dot truncated Gaussians, each renormalized to unit mass.

    Truncation radius is ceil(3*sigma); renormalization runs after both the
    radius cut and any clipping at the image border, so every dot contributes
    exactly 1 to the total.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = np.zeros((1, H, W), dtype=np.float64)
    r = math.ceil(3.0 * sigma)
    inv = 1.0 / (2.0 * sigma * sigma)
    for (dy, dx) in dots:
        if not (0 <= dy <= H - 1 and 0 <= dx <= W - 1):
            raise ValueError(f"dot ({dy},{dx}) outside {H}x{W} image")
        cy = int(round(dy))
        cx = int(round(dx))
        y0, y1 = max(0, cy - r), min(H, cy + r + 1)
        x0, x1 = max(0, cx - r), min(W, cx + r + 1)
        yy = np.arange(y0, y1, dtype=np.float64)[:, None] - dy
        xx = np.arange(x0, x1, dtype=np.float64)[None, :] - dx
        kern = np.exp(-(yy * yy + xx * xx) * inv)
        out[0, y0:y1, x0:x1] += kern / kern.sum()
    return Tensor(out)


def binary_mask(density: Tensor, delta: float) -> Tensor:
    if delta < 0:
        raise ValueError("delta must be >= 0")
    return Tensor((density.data > delta).astype(np.float64))


def downsample_density(density: Tensor, f: int) -> Tensor:
    """Sum-pool over f x f blocks, preserving total mass."""
    if f < 1:
        raise ValueError("factor must be >= 1")
    c, H, W = density.data.shape
    if H % f or W % f:
        raise ValueError(f"spatial size ({H},{W}) not divisible by {f}")
    d = density.data.reshape(c, H // f, f, W // f, f).sum(axis=(2, 4))
    return Tensor(d)


def augment_flip(s: Sample, seed: int, force: bool = False) -> Sample:
    """Mirror the sample horizontally with probability 0.5 (always if force)."""
    if not force:
        rng = np.random.default_rng([int(s.seed) & (2**63 - 1), int(seed) & (2**63 - 1), 0x5F11])
        if rng.random() >= 0.5:
            return s
    W = s.image.data.shape[-1]
    dots = None if s.dots is None else [(r, W - 1 - c) for (r, c) in s.dots]
    return Sample(image=Tensor(s.image.data[..., ::-1].copy()),
                  dots=dots,
                  class_id=s.class_id,
                  density=Tensor(s.density.data[..., ::-1].copy()),
                  mask=Tensor(s.mask.data[..., ::-1].copy()),
                  seed=s.seed,
                  n_dots=s.n_dots)


# ---------------------------------------------------------------------------
# benchmark assembly

_SPLIT_STRIDE = 1_000_000
_SPLITS = ("train", "val", "test")


def split_seed_range(base_seed: int, class_id: int, split: str, n: int) -> range:
    """Disjoint contiguous seed blocks per (class, split)."""
    k = _SPLITS.index(split)
    start = int(base_seed) + (class_id * len(_SPLITS) + k) * _SPLIT_STRIDE
    if n > _SPLIT_STRIDE:
        raise ValueError("split larger than the reserved seed block")
    return range(start, start + n)


def default_class_specs(n_counting: int = 4) -> list[ClassSpec]:
    """Background plus n distinct-shape counting classes."""
    if not (1 <= n_counting <= 5):
        raise ValueError("default specs support 1..5 counting classes")
    counting_kinds = ("disk", "square", "triangle", "cross", "diamond")
    specs = [ClassSpec(class_id=0, shape_kind="ring", count_range=(0, 0))]
    for i in range(n_counting):
        specs.append(ClassSpec(class_id=i + 1, shape_kind=counting_kinds[i]))
    return specs


def make_benchmark(specs: list[ClassSpec], sizes: SplitSizes, base_seed: int,
                   H: int = 64, W: int = 64, sigma: float = DEFAULT_SIGMA,
                   delta: float = DEFAULT_DELTA) -> list[StageDataset]:
    """Build one StageDataset per counting class, in class order.

    Background samples are folded into stage 1's splits, so the first stage
    trains and evaluates class 1 against genuinely empty scenes.
    """
    ids = [s.class_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate class_ids")
    if 0 not in ids or len(specs) < 2:
        raise ValueError("need a background class plus at least one counting class")
    kinds = [s.shape_kind for s in specs]
    if len(set(kinds)) != len(kinds):
        raise ValueError("classes must use distinct shape_kinds")

    by_id = {s.class_id: s for s in specs}
    counting = sorted(i for i in ids if i > 0)
    if counting != list(range(1, len(counting) + 1)):
        raise ValueError("counting class_ids must be 1..K without gaps")

    def gen_split(cls, split, n):
        return [generate_sample(cls, sd, H, W, sigma=sigma, delta=delta)
                for sd in split_seed_range(base_seed, cls.class_id, split, n)]

    stages = []
    for cid in counting:
        cls = by_id[cid]
        ds = StageDataset(class_id=cid,
                          train=gen_split(cls, "train", sizes.train),
                          val=gen_split(cls, "val", sizes.val),
                          test=gen_split(cls, "test", sizes.test))
        if cid == 1:
            bg = by_id[0]
            ds.train = ds.train + gen_split(bg, "train", sizes.train)
            ds.val = ds.val + gen_split(bg, "val", sizes.val)
            ds.test = ds.test + gen_split(bg, "test", sizes.test)
        stages.append(ds)
    return stages
