"""Deeply-supervised training: patch sampling, augmentation, combined loss and SGD."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import fileio
from .engine import Tensor, ShapeError, backward, mse_loss, scale, sgd_momentum_step, sum_squares
from .model import ForwardOutput, ParamStore, build_params, forward
from .targets import LR_FACTORS, DensityTarget, make_lrgt

log = logging.getLogger(__name__)

DEFAULT_LR_CANDIDATES = (0.05, 0.01, 0.005, 0.0001, 0.0005, 0.001)


@dataclass
class TrainConfig:
    alpha: tuple[float, float, float] = (1 / 64, 1 / 16, 1 / 4)
    lam: float = 0.01
    beta: float = 0.99
    lr: float = 0.01
    lr_candidates: tuple[float, ...] = DEFAULT_LR_CANDIDATES
    batch_size: int = 100
    epochs: int = 6000
    patches_per_image: int = 100
    patch_size: int = 128
    amplification: float = 100.0
    rotation_range: float = 40.0
    augment: bool = True
    seed: int = 0
    update_form: str = "descent"
    probe_fraction: float = 0.05
    val_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        self.alpha = tuple(float(a) for a in self.alpha)
        self.lr_candidates = tuple(float(v) for v in self.lr_candidates)
        if len(self.alpha) != 3 or not all(0.0 <= a <= 1.0 for a in self.alpha):
            raise ValueError(f"alpha must be three weights in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.patch_size % 8:
            raise ValueError(f"patch size {self.patch_size} must be divisible by 8")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Sample:
    """One preprocessed training image and its ground truth."""
    image_id: str
    image: np.ndarray            # (C, H, W) float32 in [0, 1]
    target: DensityTarget
    count: int = 0


@dataclass
class TrainState:
    params: ParamStore
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


@dataclass
class LossTerms:
    total: Tensor                # L_cmb including the l2 penalty
    data: Tensor                 # L + sum_k alpha_k L_k, what gets back-propagated
    main: float
    aux: list[float]


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: dict[str, np.ndarray] | None = None):
        super().__init__(msg)
        self.last_good = last_good


def preprocess(image: np.ndarray, channels: int = 3) -> Tensor:
    """8-bit image, ``(H, W)`` or ``(C, H, W)``, to a ``(1, channels, H, W)`` tensor in [0, 1]."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    if img.shape[0] == 1 and channels > 1:
        img = np.repeat(img, channels, axis=0)
    if img.shape[0] != channels:
        raise ShapeError(f"image has {img.shape[0]} channels, expected {channels}")
    return Tensor((img.astype(np.float32) / np.float32(255.0))[None])


def make_sample(image_id: str, image: np.ndarray, full_density: np.ndarray, count: int | None = None,
                channels: int = 3) -> Sample:
    x = preprocess(image, channels).data[0]
    cnt = int(round(full_density.sum())) if count is None else int(count)
    return Sample(image_id, x, DensityTarget.from_full(full_density), cnt)


# ------------------------------------------------------------ augmentation

def rotate_flip(patch: np.ndarray, density: np.ndarray, angle: float = 0.0,
                flip_h: bool = False, flip_v: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Rotate (bilinear, zero fill) then flip an image patch and its density map together."""
    p, d = patch, density
    if angle:
        p = ndimage.rotate(p, angle, axes=(-1, -2), reshape=False, order=1, mode="constant", cval=0.0)
        d = ndimage.rotate(d, angle, axes=(-1, -2), reshape=False, order=1, mode="constant", cval=0.0)
        d = np.clip(d, 0.0, None)
    if flip_h:
        p, d = p[..., ::-1], d[..., ::-1]
    if flip_v:
        p, d = p[..., ::-1, :], d[..., ::-1, :]
    return np.ascontiguousarray(p), np.ascontiguousarray(d)


def augment(patch: np.ndarray, density: np.ndarray, rng: np.random.Generator,
            max_angle: float = 40.0) -> tuple[np.ndarray, np.ndarray]:
    angle = float(rng.uniform(0.0, max_angle)) if max_angle > 0 else 0.0
    flip_h, flip_v = rng.random(2) < 0.5
    return rotate_flip(patch, density, angle, bool(flip_h), bool(flip_v))


# ------------------------------------------------------------ patches

def sample_patches(image: np.ndarray, target: DensityTarget, n: int, rng: np.random.Generator,
                   patch_size: int = 128) -> list[tuple[np.ndarray, np.ndarray, list[np.ndarray]]]:
    """Random crops with offsets snapped to multiples of 8.

    Returns ``(patch, full_crop, [lr1, lr2, lr3])`` tuples; the low-resolution
    crops are cut out of the image-level sum-pooled maps.
    """
    h, w = image.shape[-2:]
    if h < patch_size or w < patch_size:
        raise ValueError(f"image {h}x{w} is smaller than the {patch_size}px patch")
    rows = (h - patch_size) // 8 + 1
    cols = (w - patch_size) // 8 + 1
    out = []
    for _ in range(n):
        r = 8 * int(rng.integers(rows))
        c = 8 * int(rng.integers(cols))
        patch = image[..., r:r + patch_size, c:c + patch_size]
        full = target.full[r:r + patch_size, c:c + patch_size]
        lrs = [lr[r // f:(r + patch_size) // f, c // f:(c + patch_size) // f]
               for lr, f in zip(target.lr, LR_FACTORS)]
        out.append((patch, full, lrs))
    return out


# ------------------------------------------------------------ loss

def combined_loss(out: ForwardOutput, full_target, lr_targets: Sequence | None,
                  cfg: TrainConfig, params: ParamStore) -> LossTerms:
    """Main MSE plus alpha-weighted aux MSEs plus the l2 penalty on every parameter.

    Targets must already be multiplied by ``cfg.amplification``.
    """
    main = mse_loss(out.density, full_target)
    data = main
    aux_vals = []
    if out.aux_maps is not None:
        if lr_targets is None or len(lr_targets) != 3:
            raise ValueError("three low-resolution targets are required with aux heads")
        for a, amap, tgt in zip(cfg.alpha, out.aux_maps, lr_targets):
            tgt = np.asarray(tgt)
            if amap.shape != tgt.shape:
                raise ShapeError(f"aux map {amap.shape} does not match LR target {tgt.shape}")
            lk = mse_loss(amap, tgt)
            aux_vals.append(float(lk.data))
            if a:
                data = data + scale(lk, a)
    total = data
    if cfg.lam:
        penalty = None
        for p in params:
            sq = sum_squares(p)
            penalty = sq if penalty is None else penalty + sq
        total = data + scale(penalty, cfg.lam)
    return LossTerms(total=total, data=data, main=float(main.data), aux=aux_vals)


def _stack_batch(items, amplification: float):
    x = Tensor(np.stack([it[0] for it in items]).astype(np.float32))
    full = np.stack([it[1] for it in items])[:, None] * amplification
    lrs = [np.stack([it[2][k] for it in items])[:, None] * amplification for k in range(3)]
    return x, full, lrs


def _epoch_patches(data: Sequence[Sample], cfg: TrainConfig, rng: np.random.Generator):
    items = []
    for s in data:
        for patch, full, _ in sample_patches(s.image, s.target, cfg.patches_per_image, rng, cfg.patch_size):
            if cfg.augment:
                patch, full = augment(patch, full, rng, cfg.rotation_range)
            items.append((patch, full, make_lrgt(full)))
    order = rng.permutation(len(items))
    return [items[i] for i in order]


def validation_loss(params: ParamStore, data: Sequence[Sample], amplification: float = 100.0) -> float:
    """Mean final-output MSE over whole validation images."""
    if not data:
        return float("nan")
    tot = 0.0
    for s in data:
        pred = forward(Tensor(s.image[None]), params).density
        tot += float(mse_loss(pred, s.target.full[None, None] * amplification).data)
    return tot / len(data)


def train_epoch(state: TrainState, data: Sequence[Sample], cfg: TrainConfig,
                rng: np.random.Generator, use_aux: bool | None = None) -> dict:
    """One pass over freshly sampled patches; returns the epoch's mean losses."""
    if not data:
        raise ValueError("no training data")
    params = state.params
    use_aux = params.has_aux if use_aux is None else use_aux
    items = _epoch_patches(data, cfg, rng)
    sums = {"lcmb": 0.0, "l": 0.0}
    nb = 0
    for i in range(0, len(items), cfg.batch_size):
        x, full, lrs = _stack_batch(items[i:i + cfg.batch_size], cfg.amplification)
        out = forward(x, params, with_aux=use_aux)
        terms = combined_loss(out, full, lrs if out.aux_maps is not None else None, cfg, params)
        lcmb = float(terms.total.data)
        if not math.isfinite(lcmb):
            raise TrainingDiverged(f"non-finite loss at epoch {state.epoch + 1}, batch {nb + 1}")
        backward(terms.data)
        sgd_momentum_step(params, cfg.lr, cfg.beta, cfg.lam, form=cfg.update_form)
        sums["lcmb"] += lcmb
        sums["l"] += terms.main
        nb += 1
    state.epoch += 1
    return {"epoch": state.epoch, "train_lcmb": sums["lcmb"] / nb, "train_l": sums["l"] / nb}


def train(params: ParamStore, train_data: Sequence[Sample], cfg: TrainConfig,
          val_data: Sequence[Sample] = (), use_aux: bool | None = None,
          run_dir: str | Path | None = None, epochs: int | None = None) -> TrainState:
    """Run ``epochs`` (default ``cfg.epochs``) epochs; deterministic per ``cfg.seed``.

    With ``run_dir`` the config, a loss CSV and periodic checkpoints are written.
    On divergence the parameters are restored to the last finished epoch and
    ``TrainingDiverged`` is raised.
    """
    n_epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(cfg.seed)
    state = TrainState(params)
    run_dir = Path(run_dir) if run_dir else None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        fileio.write_config(run_dir / "config.txt", {"arch": params.arch, "aux_enabled": bool(
            params.has_aux if use_aux is None else use_aux), "width": params.width, **cfg.as_dict()})
    for ep in range(n_epochs):
        snapshot = params.state_dict()
        try:
            rec = train_epoch(state, train_data, cfg, rng, use_aux)
        except (TrainingDiverged, FloatingPointError) as exc:
            params.load_state_dict(snapshot)
            if run_dir:
                fileio.save_checkpoint(run_dir / "last_good.dckp", params)
            raise TrainingDiverged(str(exc), last_good=snapshot) from exc
        last = ep == n_epochs - 1
        if val_data and (last or (cfg.val_every and state.epoch % cfg.val_every == 0)):
            rec["val_l"] = validation_loss(params, val_data, cfg.amplification)
        else:
            rec["val_l"] = float("nan")
        state.history.append(rec)
        log.debug("epoch %d  lcmb %.4g  val %.4g", rec["epoch"], rec["train_lcmb"], rec["val_l"])
        if run_dir:
            fileio.write_loss_csv(run_dir / "losses.csv", state.history)
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                fileio.save_checkpoint(run_dir / f"epoch{state.epoch:05d}.dckp", params)
    if run_dir:
        fileio.save_checkpoint(run_dir / "final.dckp", params)
    return state


def select_lr(candidates: Sequence[float], train_data: Sequence[Sample], val_data: Sequence[Sample],
              cfg: TrainConfig, arch: str = "cfcrn", aux: bool | None = None, width: float = 1.0,
              probe_epochs: int | None = None) -> float:
    """Line search: brief training per rate, keep the lowest validation loss.

    Each probe starts from the same initialisation. Probes whose loss becomes
    non-finite are discarded.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no learning-rate candidates")
    if len(candidates) == 1:
        return float(candidates[0])
    n = probe_epochs if probe_epochs is not None else max(1, round(cfg.probe_fraction * cfg.epochs))
    scores = {}
    for lr in candidates:
        params = build_params(arch, cfg.seed, aux=aux, width=width)
        probe_cfg = TrainConfig(**{**cfg.as_dict(), "lr": float(lr), "val_every": 0})
        try:
            train(params, train_data, probe_cfg, epochs=n)
        except TrainingDiverged:
            log.info("lr %g diverged", lr)
            continue
        score = validation_loss(params, val_data or train_data, cfg.amplification)
        if math.isfinite(score):
            scores[float(lr)] = score
    if not scores:
        raise RuntimeError(f"every learning-rate probe diverged: {candidates}")
    return min(scores, key=scores.get)
