"""Synthetic fluorescence-like cell images with exact centroid annotations.

Cells are rendered as randomly oriented elliptical blobs with a smooth
intensity fall-off on a uniform background, followed by additive Gaussian
pixel noise and 8-bit quantisation. It approximates clustered bacterial
fluorescence images; it is not a physical microscope model.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import fileio
from .targets import CentroidList


@dataclass(frozen=True)
class SyntheticSpec:
    n_images: int = 200
    dims: tuple[int, int] = (256, 256)
    count_range: tuple[int, int] = (110, 238)
    cell_radius_range: tuple[float, float] = (3.0, 5.0)
    intensity_range: tuple[float, float] = (0.5, 1.0)
    overlap_allowed: bool = True
    noise_sigma: float = 0.03
    background_level: float = 0.08
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or lo > hi:
            raise ValueError(f"invalid count range {self.count_range}")
        m, n = self.dims
        if m % 8 or n % 8:
            raise ValueError(f"image dims {m}x{n} must be divisible by 8")
        if self.cell_radius_range[0] <= 0 or self.cell_radius_range[0] > self.cell_radius_range[1]:
            raise ValueError(f"invalid radius range {self.cell_radius_range}")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_strings(cls, raw: dict[str, str]) -> "SyntheticSpec":
        def pair(v, typ):
            a, b = v.replace("x", ",").split(",")
            return typ(a), typ(b)

        conv = {"n_images": int, "seed": int, "noise_sigma": float, "background_level": float,
                "dims": lambda v: pair(v, int), "count_range": lambda v: pair(v, int),
                "cell_radius_range": lambda v: pair(v, float), "intensity_range": lambda v: pair(v, float),
                "overlap_allowed": lambda v: v.lower() in ("1", "true", "yes")}
        unknown = set(raw) - set(conv)
        if unknown:
            raise ValueError(f"unknown synthetic-spec keys: {sorted(unknown)}")
        return cls(**{k: conv[k](v) for k, v in raw.items()})


BACTERIAL = SyntheticSpec()


@dataclass
class SyntheticImage:
    image_id: str
    image: np.ndarray            # (1, M, N) uint8
    centroids: CentroidList


def _place(rng, count, dims, radii, overlap_allowed, max_tries=200):
    m, n = dims
    pts = np.empty((count, 2), dtype=np.int64)
    if overlap_allowed:
        pts[:, 0] = rng.integers(0, m, count)
        pts[:, 1] = rng.integers(0, n, count)
        return pts
    for i in range(count):
        for _ in range(max_tries):
            p = (int(rng.integers(0, m)), int(rng.integers(0, n)))
            if i == 0:
                break
            d2 = (pts[:i, 0] - p[0]) ** 2 + (pts[:i, 1] - p[1]) ** 2
            if np.all(d2 >= (radii[:i] + radii[i]) ** 2):
                break
        else:
            raise ValueError(f"cannot place {count} non-overlapping cells in a {m}x{n} image; "
                             "lower the count or allow overlap")
        pts[i] = p
    return pts


def render_image(rng: np.random.Generator, spec: SyntheticSpec, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw one image; returns ``(uint8 (1, M, N) image, (count, 2) centroids)``."""
    m, n = spec.dims
    radii = rng.uniform(*spec.cell_radius_range, size=count)
    pts = _place(rng, count, spec.dims, radii, spec.overlap_allowed)
    aspect = rng.uniform(0.6, 1.0, size=count)
    theta = rng.uniform(0.0, np.pi, size=count)
    level = rng.uniform(*spec.intensity_range, size=count)

    canvas = np.full((m, n), spec.background_level, dtype=np.float64)
    for (x, y), r, asp, th, amp in zip(pts, radii, aspect, theta, level):
        ext = int(np.ceil(1.6 * r)) + 1
        r0, r1 = max(x - ext, 0), min(x + ext + 1, m)
        c0, c1 = max(y - ext, 0), min(y + ext + 1, n)
        dr = np.arange(r0, r1)[:, None] - x
        dc = np.arange(c0, c1)[None, :] - y
        u = dr * np.cos(th) + dc * np.sin(th)
        v = -dr * np.sin(th) + dc * np.cos(th)
        e2 = (u / r) ** 2 + (v / (r * asp)) ** 2
        canvas[r0:r1, c0:c1] += amp * np.exp(-2.0 * e2) * (e2 <= 2.56)
    canvas += rng.normal(0.0, spec.noise_sigma, size=canvas.shape)
    img = np.round(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)
    return img[None], pts


def generate_synthetic(spec: SyntheticSpec = BACTERIAL) -> list[SyntheticImage]:
    rng = np.random.default_rng(spec.seed)
    out = []
    for i in range(spec.n_images):
        count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
        img, pts = render_image(rng, spec, count)
        iid = f"img{i:04d}"
        out.append(SyntheticImage(iid, img, CentroidList(iid, pts, spec.dims)))
    return out


def write_dataset(root: str | Path, data: list[SyntheticImage], spec: SyntheticSpec | None = None) -> Path:
    """Layout: ``images/<id>.png``, ``annotations/<id>.csv`` and optionally ``spec.txt``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    for item in data:
        fileio.write_image(root / "images" / f"{item.image_id}.png", item.image)
        fileio.write_annotations(root / "annotations" / f"{item.image_id}.csv", item.centroids.points)
    if spec is not None:
        fileio.write_config(root / "spec.txt", spec.as_dict())
    return root


def read_dataset(root: str | Path) -> list[SyntheticImage]:
    root = Path(root)
    out = []
    for img_path in sorted((root / "images").glob("*.png")):
        iid = img_path.stem
        img = fileio.read_image(img_path)
        pts = fileio.read_annotations(root / "annotations" / f"{iid}.csv")
        out.append(SyntheticImage(iid, img, CentroidList(iid, pts, img.shape[-2:])))
    if not out:
        raise FileNotFoundError(f"no images found under {root / 'images'}")
    return out
