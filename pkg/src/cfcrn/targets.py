"""Ground-truth maps built from annotated cell centroids.

Coordinates follow the image array convention used throughout the package:
a centroid ``(x, y)`` sits at row ``x`` and column ``y`` of an ``(M, N)``
image, so ``0 <= x < M`` and ``0 <= y < N``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import ShapeError

LR_FACTORS = (8, 4, 2)


@dataclass
class CentroidList:
    image_id: str
    points: np.ndarray
    image_dims: tuple[int, int]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.int64).reshape(-1, 2)
        m, n = (int(d) for d in self.image_dims)
        if len(pts) and (pts[:, 0].min() < 0 or pts[:, 0].max() >= m
                         or pts[:, 1].min() < 0 or pts[:, 1].max() >= n):
            raise ValueError(f"{self.image_id}: centroid outside image of size {m}x{n}")
        self.points = pts
        self.image_dims = (m, n)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class KernelSpec:
    sigma: float = 3.0
    half_width: int = 10

    @property
    def size(self) -> int:
        return 2 * self.half_width + 1


BONE_MARROW_KERNEL = KernelSpec(sigma=5.0, half_width=10)


@dataclass(frozen=True)
class ProximitySpec:
    decay_alpha: float = 3.0
    d: float = 15.0

    def __post_init__(self):
        if self.decay_alpha <= 0 or self.d <= 0:
            raise ValueError("proximity decay and distance threshold must be positive")


@dataclass
class DensityTarget:
    full: np.ndarray
    lr: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def from_full(cls, full: np.ndarray) -> "DensityTarget":
        return cls(full=full, lr=make_lrgt(full))


def gaussian_kernel(spec: KernelSpec) -> np.ndarray:
    if spec.sigma <= 0 or spec.half_width < 1:
        raise ValueError(f"invalid kernel spec {spec}")
    r = np.arange(-spec.half_width, spec.half_width + 1, dtype=np.float64)
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * spec.sigma ** 2))
    return g / g.sum()


def density_map(centroids: CentroidList, spec: KernelSpec = KernelSpec()) -> np.ndarray:
    """Sum of unit-mass Gaussian kernels, one per centroid (float64 map).

    A kernel cut by the image border is rescaled so that the part inside the
    image still integrates to one; the map therefore always sums to the count.
    """
    m, n = centroids.image_dims
    out = np.zeros((m, n), dtype=np.float64)
    kern = gaussian_kernel(spec)
    k = spec.half_width
    for x, y in centroids.points:
        r0, r1 = max(x - k, 0), min(x + k + 1, m)
        c0, c1 = max(y - k, 0), min(y + k + 1, n)
        piece = kern[r0 - (x - k):r1 - (x - k), c0 - (y - k):c1 - (y - k)]
        out[r0:r1, c0:c1] += piece / piece.sum()
    return out


def sum_pool(a: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping ``factor x factor`` sum pooling over the last two axes."""
    h, w = a.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"map of size {h}x{w} is not divisible by {factor}")
    lead = a.shape[:-2]
    return a.reshape(*lead, h // factor, factor, w // factor, factor).sum(axis=(-3, -1))


def make_lrgt(full: np.ndarray) -> list[np.ndarray]:
    """Low-resolution targets at 1/8, 1/4 and 1/2 resolution, in aux-head order."""
    h, w = full.shape[-2:]
    if h % 8 or w % 8:
        raise ShapeError(f"density map {h}x{w} must be divisible by 8")
    return [sum_pool(full, f) for f in LR_FACTORS]


def nearest_distance(centroids: CentroidList) -> np.ndarray:
    m, n = centroids.image_dims
    rows = np.arange(m, dtype=np.float64)[:, None]
    cols = np.arange(n, dtype=np.float64)[None, :]
    best = np.full((m, n), np.inf)
    for x, y in centroids.points:
        np.minimum(best, (rows - x) ** 2 + (cols - y) ** 2, out=best)
    return np.sqrt(best)


def proximity_map(centroids: CentroidList, spec: ProximitySpec = ProximitySpec()) -> np.ndarray:
    if len(centroids) == 0:
        raise ValueError("proximity map needs at least one centroid")
    dist = nearest_distance(centroids)
    a, d = spec.decay_alpha, spec.d
    vals = np.expm1(a * (1.0 - dist / d)) / np.expm1(a)
    return np.where(dist <= d, vals, 0.0)
