"""Finite-difference gradient checks for the engine ops and the full training loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import engine as E
from .model import AUX_GROUPS, MAIN_GROUPS, build_params, cfcrn_forward
from .targets import make_lrgt


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.rel_error < self.tol)

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: rel err {self.rel_error:.2e} (tol {self.tol:.0e})"


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference ``|a-b| / max(|a|, |b|)``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / den)


def numeric_grad(loss_fn: Callable[[], float], arr: np.ndarray, h: float = 1e-3,
                 indices=None) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. entries of ``arr`` (perturbed in place).

    The step actually representable in ``arr.dtype`` is used as the divisor.
    """
    if not arr.flags.c_contiguous:
        raise ValueError("numeric_grad perturbs in place and needs a C-contiguous array")
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx) if indices is not None else flat.size, dtype=np.float64)
    for j, i in enumerate(idx):
        orig = flat[i]
        up = flat.dtype.type(orig + h)
        dn = flat.dtype.type(orig - h)
        flat[i] = up
        fp = loss_fn()
        flat[i] = dn
        fm = loss_fn()
        flat[i] = orig
        out[j] = (fp - fm) / (float(up) - float(dn))
    return out


def _analytic(build: Callable[[], E.Tensor], leaves: list[E.Tensor]) -> list[np.ndarray]:
    for t in leaves:
        t.grad = None
    E.backward(build())
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]


def check_graph(name: str, build: Callable[[], E.Tensor], leaves: list[E.Tensor],
                h: float = 1e-3, tol: float = 1e-3) -> CheckResult:
    """Compare backprop against central differences for every entry of ``leaves``."""
    analytic = _analytic(build, leaves)
    numeric = [numeric_grad(lambda: float(build().data), t.data, h).reshape(t.shape) for t in leaves]
    return CheckResult(name, rel_error(np.concatenate([a.ravel() for a in analytic]),
                                       np.concatenate([n.ravel() for n in numeric])), tol)


def _leaf(rng, shape, spread=1.0):
    return E.Tensor(rng.standard_normal(shape) * spread, requires_grad=True)


def op_checks(seed: int = 0, h: float = 1e-3, tol: float = 1e-3) -> list[CheckResult]:
    """Per-op checks; each op output is reduced by an MSE against a random target."""
    rng = np.random.default_rng(seed)
    res = []

    x = _leaf(rng, (2, 3, 8, 8))
    w = _leaf(rng, (4, 3, 3, 3), 0.3)
    b = _leaf(rng, (4,))
    t = rng.standard_normal((2, 4, 8, 8))
    res.append(check_graph("conv2d_same 3x3", lambda: E.mse_loss(E.conv2d_same(x, w, b), t), [x, w, b], h, tol))

    x1 = _leaf(rng, (2, 5, 6, 6))
    w1 = _leaf(rng, (3, 5, 1, 1), 0.3)
    b1 = _leaf(rng, (3,))
    t1 = rng.standard_normal((2, 3, 6, 6))
    res.append(check_graph("conv2d_same 1x1", lambda: E.mse_loss(E.conv2d_same(x1, w1, b1), t1), [x1, w1, b1], h, tol))

    xr = _leaf(rng, (2, 3, 10, 10))
    # keep inputs away from the kink so the central difference is valid
    xr.data += np.where(xr.data >= 0, 10 * h, -10 * h).astype(xr.data.dtype)
    tr = rng.standard_normal((2, 3, 10, 10))
    res.append(check_graph("relu", lambda: E.mse_loss(E.relu(xr), tr), [xr], h, tol))

    xp = _leaf(rng, (2, 3, 8, 8))
    tp = rng.standard_normal((2, 3, 4, 4))
    res.append(check_graph("maxpool2", lambda: E.mse_loss(E.maxpool2(xp), tp), [xp], h, tol))

    xu = _leaf(rng, (2, 3, 5, 7))
    tu = rng.standard_normal((2, 3, 10, 14))
    res.append(check_graph("upsample_bilinear2", lambda: E.mse_loss(E.upsample_bilinear2(xu), tu), [xu], h, tol))

    ca = _leaf(rng, (2, 2, 4, 4))
    cb = _leaf(rng, (2, 3, 4, 4))
    tc = rng.standard_normal((2, 5, 4, 4))
    res.append(check_graph("concat_channels", lambda: E.mse_loss(E.concat_channels(ca, cb), tc), [ca, cb], h, tol))

    xm = _leaf(rng, (3, 2, 4, 4))
    tm = rng.standard_normal((3, 2, 4, 4))
    res.append(check_graph("mse_loss", lambda: E.mse_loss(xm, tm), [xm], h, tol))

    xs = _leaf(rng, (2, 3, 4, 4))
    ys = _leaf(rng, (2, 3, 4, 4))
    res.append(check_graph("add/scale/sum_squares",
                           lambda: E.scale(E.sum_squares(E.add(xs, ys)), 0.5) + E.sum_squares(xs), [xs, ys], h, tol))
    return res


def _at_kink(loss_fn: Callable[[], float], arr: np.ndarray, i: int, h: float, ratio: float = 0.02) -> bool:
    """True when the two one-sided slopes disagree, i.e. a ReLU switched inside the step."""
    flat = arr.reshape(-1)
    orig = flat[i]
    f0 = loss_fn()
    flat[i] = flat.dtype.type(orig + h)
    fp = loss_fn()
    flat[i] = flat.dtype.type(orig - h)
    fm = loss_fn()
    flat[i] = orig
    right, left = (fp - f0) / h, (f0 - fm) / h
    return abs(right - left) > ratio * max(abs(right), abs(left), 1e-6) + 1e-3


def end_to_end_check(seed: int = 0, size: int = 16, per_group: int = 12, h: float = 1e-6,
                     tol: float = 1e-2, alpha=(1 / 64, 1 / 16, 1 / 4), lam: float = 0.01,
                     amplification: float = 100.0) -> list[CheckResult]:
    """Combined C-FCRN+Aux loss on a ``(1, 3, size, size)`` input, one check per parameter group.

    ``per_group`` random coordinates are sampled from each group; the input
    and targets are random but fixed by ``seed``. The network is evaluated in
    float64 so the step can be small enough to stay clear of ReLU switches;
    coordinates that still straddle one are skipped.
    """
    with E.precision(np.float64):
        return _end_to_end(seed, size, per_group, h, tol, alpha, lam, amplification)


def _end_to_end(seed, size, per_group, h, tol, alpha, lam, amplification):
    rng = np.random.default_rng(seed)
    params = build_params("cfcrn", seed)
    x = E.Tensor(rng.uniform(0.0, 1.0, (1, 3, size, size)))
    full = rng.uniform(0.0, 0.02, (size, size))
    y = full[None, None] * amplification
    lrs = [m[None, None] * amplification for m in make_lrgt(full)]

    def loss():
        out = cfcrn_forward(x, params, with_aux=True)
        tot = E.mse_loss(out.density, y)
        for a, amap, t in zip(alpha, out.aux_maps, lrs):
            tot = tot + E.scale(E.mse_loss(amap, t), a)
        pen = None
        for p in params:
            s = E.sum_squares(p)
            pen = s if pen is None else pen + s
        return tot + E.scale(pen, lam)

    params.zero_grad()
    E.backward(loss())
    results = []
    for gname in MAIN_GROUPS + AUX_GROUPS:
        group = params.group(gname)
        sizes = np.array([p.data.size for p in group])
        picks = rng.choice(sizes.sum(), size=min(per_group, int(sizes.sum())), replace=False)
        bounds = np.cumsum(sizes)
        analytic, numeric = [], []
        for flat_idx in picks:
            k = int(np.searchsorted(bounds, flat_idx, side="right"))
            local = int(flat_idx - (bounds[k - 1] if k else 0))
            p = group[k]
            if _at_kink(lambda: float(loss().data), p.data, local, h):
                continue
            analytic.append(float(p.grad.reshape(-1)[local]))
            numeric.append(numeric_grad(lambda: float(loss().data), p.data, h, [local])[0])
        results.append(CheckResult(f"end-to-end {gname}", rel_error(analytic, numeric), tol))
    params.zero_grad()
    return results
