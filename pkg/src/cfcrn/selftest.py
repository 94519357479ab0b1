"""Quick correctness suite run by ``cfcrn selftest`` before any training."""

from __future__ import annotations

import numpy as np

from .gradcheck import end_to_end_check, op_checks
from .model import build_params, cfcrn_forward
from .engine import Tensor, mse_loss
from .targets import CentroidList, KernelSpec, ProximitySpec, density_map, make_lrgt, proximity_map


def _counting_identity(rng) -> tuple[bool, str]:
    worst = 0.0
    for i in range(20):
        n = int(rng.integers(0, 51))
        pts = np.stack([rng.integers(0, 64, n), rng.integers(0, 64, n)], axis=1)
        y = density_map(CentroidList(f"s{i}", pts, (64, 64)), KernelSpec())
        worst = max(worst, abs(y.sum() - n))
    return worst < 1e-4, f"max |sum - N_c| = {worst:.1e}"


def _lrgt_conservation(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(20):
        y = rng.random((64, 64))
        worst = max(worst, max(abs(m.sum() - y.sum()) for m in make_lrgt(y)))
    return worst < 1e-4, f"max mass change = {worst:.1e}"


def _partition(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    params = build_params("cfcrn", seed)
    x = Tensor(rng.random((1, 3, 16, 16)))
    zeros = [np.zeros((1, 1, s, s)) for s in (2, 4, 8)]
    before = [float(mse_loss(a, z).data) for a, z in zip(cfcrn_forward(x, params).aux_maps, zeros)]
    for p in params.group("theta4"):
        p.data += np.float32(0.1) * rng.standard_normal(p.shape).astype(np.float32)
    after = [float(mse_loss(a, z).data) for a, z in zip(cfcrn_forward(x, params).aux_maps, zeros)]
    delta = max(abs(a - b) for a, b in zip(before, after))
    return delta < 1e-6, f"max |dL_k| after perturbing theta4 = {delta:.1e}"


def run_selftest(quick: bool = True, seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    out = [(r.name, r.ok, f"rel err {r.rel_error:.2e}") for r in op_checks(seed)]
    out.append(("counting identity",) + _counting_identity(rng))
    out.append(("LRGT conservation",) + _lrgt_conservation(rng))
    c = CentroidList("p", [[10, 10]], (32, 32))
    pm = proximity_map(c, ProximitySpec(3.0, 15.0))
    out.append(("proximity endpoints", bool(pm[10, 10] == 1.0 and pm[10, 25] == 0.0), "M=1 at centroid, 0 at D=d"))
    out.append(("deep-supervision partition",) + _partition(seed))
    if not quick:
        out += [(r.name, r.ok, f"rel err {r.rel_error:.2e}") for r in end_to_end_check(seed)]
    return out
