"""Counting, count-error metrics, centroid extraction, folds and paired t-tests."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .engine import Tensor
from .targets import CentroidList


def count_cells(density, amplification: float = 1.0) -> float:
    """Integrate a (possibly amplified) density map."""
    d = density.data if isinstance(density, Tensor) else density
    return float(np.sum(np.asarray(d, dtype=np.float64)) / amplification)


# ----------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    per_image: list[tuple[str, float, float]]
    mae: float
    stda: float
    mre: float
    stdr: float
    excluded_from_relative: list[str] = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.per_image)

    def summary_line(self) -> str:
        return (f"T={self.T} MAE={self.mae:.6g} STDa={self.stda:.6g} "
                f"MRE={self.mre:.6g} STDr={self.stdr:.6g}")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "true", "pred"])
            for iid, t, p in self.per_image:
                w.writerow([iid, repr(float(t)), repr(float(p))])
            fh.write(f"# {self.summary_line()}\n")

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricsReport":
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(row for row in fh if not row.startswith("#"))]
        return compute_metrics([(r["image_id"], float(r["true"]), float(r["pred"])) for r in rows])


def _sample_std(v: np.ndarray, mean: float) -> float:
    if len(v) < 2:
        return float("nan")
    return math.sqrt(float(np.sum((v - mean) ** 2)) / (len(v) - 1))


def compute_metrics(per_image: Sequence[tuple]) -> MetricsReport:
    """MAE, MRE and their sample standard deviations over ``(id, true, pred)`` rows.

    Images with a true count of zero have no relative error; they are left out
    of MRE/STDr and listed in ``excluded_from_relative``. Standard deviations
    of fewer than two values are NaN.
    """
    rows = [(str(i), float(t), float(p)) for i, t, p in per_image]
    if not rows:
        raise ValueError("no images to evaluate")
    truth = np.array([r[1] for r in rows])
    pred = np.array([r[2] for r in rows])
    abs_err = np.abs(truth - pred)
    mae = float(abs_err.mean())
    nz = truth != 0
    excluded = [r[0] for r, ok in zip(rows, nz) if not ok]
    rel = abs_err[nz] / truth[nz]
    mre = float(rel.mean()) if rel.size else float("nan")
    return MetricsReport(rows, mae, _sample_std(abs_err, mae), mre, _sample_std(rel, mre), excluded)


# ---------------------------------------------------------------- centroids

def extract_centroids(density: np.ndarray, min_distance: float = 3.0, threshold: float = 0.0,
                      image_id: str = "") -> CentroidList:
    """Local maxima above ``threshold`` thinned by greedy Euclidean non-maximum suppression."""
    d = np.asarray(density, dtype=np.float64).squeeze()
    if d.ndim != 2:
        raise ValueError(f"expected a 2-D density map, got shape {np.shape(density)}")
    peaks = (d == ndimage.maximum_filter(d, size=3, mode="constant", cval=-np.inf)) & (d > threshold)
    rr, cc = np.nonzero(peaks)
    order = np.argsort(-d[rr, cc], kind="stable")
    kept: list[tuple[int, int]] = []
    r2 = min_distance ** 2
    for i in order:
        r, c = int(rr[i]), int(cc[i])
        if all((r - a) ** 2 + (c - b) ** 2 > r2 for a, b in kept):
            kept.append((r, c))
    return CentroidList(image_id, np.array(kept, dtype=np.int64).reshape(-1, 2), d.shape)


# -------------------------------------------------------------------- folds

@dataclass
class FoldPlan:
    k: int
    assignments: dict[str, int]

    def fold(self, i: int) -> list[str]:
        return [iid for iid, f in self.assignments.items() if f == i]

    def split(self, i: int) -> tuple[list[str], list[str]]:
        """(training ids, validation ids) for fold ``i``."""
        train = [iid for iid, f in self.assignments.items() if f != i]
        return train, self.fold(i)

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(f"k = {self.k}\n")
            for iid, f in self.assignments.items():
                fh.write(f"{iid} = {f}\n")

    @classmethod
    def read(cls, path: str | Path) -> "FoldPlan":
        from .fileio import read_config

        raw = read_config(path)
        k = int(raw.pop("k"))
        return cls(k, {iid: int(f) for iid, f in raw.items()})


def make_folds(image_ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldPlan:
    ids = list(image_ids)
    if k < 1 or k > len(ids):
        raise ValueError(f"cannot split {len(ids)} images into {k} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return FoldPlan(k, {ids[j]: pos % k for pos, j in enumerate(perm)})


# ------------------------------------------------------------------ t-test

def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-15) -> float:
    """Lentz continued fraction for the regularised incomplete beta function."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(lbt) * _betacf(a, b, x) / a
    return 1.0 - math.exp(lbt) * _betacf(b, a, 1.0 - x) / b


def student_t_cdf(t: float, df: float) -> float:
    x = df / (df + t * t)
    tail = 0.5 * betainc_reg(df / 2.0, 0.5, x)
    return tail if t < 0 else 1.0 - tail


def paired_ttest_onesided(errors_a: Sequence[float], errors_b: Sequence[float]) -> tuple[float, float]:
    """Paired t-test of ``d = a - b`` against the alternative ``mean(d) < 0``.

    Returns ``(t, p)``; small ``p`` supports that ``a`` has the lower errors.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired test needs two equal-length vectors with at least two entries")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise ValueError("differences have zero variance; the t statistic is undefined")
    t = float(d.mean()) / (sd / math.sqrt(d.size))
    return t, student_t_cdf(t, d.size - 1)
