"""Dataset loading, per-image evaluation, k-fold cross-validation and the
FCRN / C-FCRN-only / C-FCRN+Aux validation-loss ablation."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fileio
from .engine import Tensor
from .evaluation import MetricsReport, compute_metrics, count_cells, make_folds
from .model import ParamStore, build_params, forward
from .synthetic import SyntheticImage, read_dataset
from .targets import KernelSpec, density_map
from .trainer import Sample, TrainConfig, make_sample, select_lr, train

log = logging.getLogger(__name__)

VARIANTS = {"fcrn": ("fcrn", False), "cfcrn_only": ("cfcrn", False), "cfcrn_aux": ("cfcrn", True)}


def samples_from_images(items: Sequence[SyntheticImage], kernel: KernelSpec = KernelSpec()) -> list[Sample]:
    return [make_sample(it.image_id, it.image, density_map(it.centroids, kernel), count=len(it.centroids))
            for it in items]


def load_samples(data_dir: str | Path, kernel: KernelSpec = KernelSpec(), require_targets: bool = True) -> list[Sample]:
    """Images and annotations from ``data_dir``; density maps from ``targets/`` when present."""
    data_dir = Path(data_dir)
    items = read_dataset(data_dir)
    tdir = data_dir / "targets"
    out = []
    for it in items:
        tpath = tdir / f"{it.image_id}.density.dct"
        if tpath.exists():
            full = fileio.read_tensor(tpath)[0, 0].astype(np.float64)
        elif require_targets:
            raise FileNotFoundError(f"missing target {tpath}; run make-targets first")
        else:
            full = density_map(it.centroids, kernel)
        out.append(make_sample(it.image_id, it.image, full, count=len(it.centroids)))
    return out


def predict_count(params: ParamStore, image: np.ndarray, amplification: float = 100.0) -> tuple[float, np.ndarray]:
    """Count for one preprocessed ``(C, H, W)`` image plus the raw (amplified) density."""
    dens = forward(Tensor(image[None]), params).density.data[0, 0]
    return count_cells(dens, amplification), dens


def evaluate_model(params: ParamStore, samples: Sequence[Sample], amplification: float = 100.0) -> MetricsReport:
    rows = [(s.image_id, s.count, predict_count(params, s.image, amplification)[0]) for s in samples]
    return compute_metrics(rows)


@dataclass
class FoldResult:
    fold: int
    report: MetricsReport
    history: list[dict]
    lr: float

    @property
    def final_val_loss(self) -> float:
        return float(self.history[-1]["val_l"])


def _run_fold(args) -> FoldResult:
    fold, arch, aux, width, cfg, train_s, val_s, out_dir, search = args
    lr = cfg.lr
    if search:
        lr = select_lr(cfg.lr_candidates, train_s, val_s, cfg, arch=arch, aux=aux, width=width)
    cfg = replace(cfg, lr=lr)
    params = build_params(arch, cfg.seed, aux=aux, width=width)
    run_dir = Path(out_dir) / f"fold{fold}" if out_dir else None
    state = train(params, train_s, cfg, val_data=val_s, use_aux=aux, run_dir=run_dir)
    report = evaluate_model(params, val_s, cfg.amplification)
    if run_dir:
        report.write_csv(run_dir / "report.csv")
    return FoldResult(fold, report, state.history, lr)


def run_crossval(samples: Sequence[Sample], cfg: TrainConfig, k: int = 5, arch: str = "cfcrn",
                 aux: bool = True, width: float = 1.0, fold_seed: int | None = None,
                 out_dir: str | Path | None = None, search_lr: bool = False,
                 jobs: int = 1) -> tuple[list[FoldResult], MetricsReport]:
    """Train one model per fold; the aggregate report pools every held-out image."""
    by_id = {s.image_id: s for s in samples}
    plan = make_folds(list(by_id), k, cfg.seed if fold_seed is None else fold_seed)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        plan.write(Path(out_dir) / "folds.txt")
    tasks = []
    for f in range(k):
        tr, va = plan.split(f)
        tasks.append((f, arch, aux, width, cfg, [by_id[i] for i in tr], [by_id[i] for i in va], out_dir, search_lr))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    pooled = compute_metrics([row for r in results for row in r.report.per_image])
    if out_dir:
        pooled.write_csv(Path(out_dir) / "aggregate.csv")
    return results, pooled


def run_ablation(samples: Sequence[Sample], cfg: TrainConfig, seeds: Sequence[int] = (0, 1, 2),
                 k: int = 5, width: float = 1.0, lr_by_variant: dict[str, float] | None = None,
                 variants: Sequence[str] = tuple(VARIANTS)) -> dict[int, dict[str, float]]:
    """Mean final validation loss L over folds, per seed and network variant.

    Within one seed every variant sees the same folds, patches and main-network
    initialisation.
    """
    out: dict[int, dict[str, float]] = {}
    for seed in seeds:
        out[seed] = {}
        for name in variants:
            arch, aux = VARIANTS[name]
            vcfg = replace(cfg, seed=seed, lr=(lr_by_variant or {}).get(name, cfg.lr))
            results, _ = run_crossval(samples, vcfg, k=k, arch=arch, aux=aux, width=width)
            out[seed][name] = float(np.mean([r.final_val_loss for r in results]))
            log.info("seed %d %s: %.4f", seed, name, out[seed][name])
    return out


def ablation_order_holds(losses: dict[str, float]) -> bool:
    return losses["cfcrn_aux"] <= losses["cfcrn_only"] <= losses["fcrn"]
