"""Density-regression cell counting with a concatenated FCRN and auxiliary
deep supervision, on a small numpy autograd engine."""

from .engine import Param, ShapeError, Tensor, backward
from .model import ParamStore, build_params, cfcrn_forward, fcrn_forward
from .targets import CentroidList, KernelSpec, ProximitySpec, density_map, make_lrgt, proximity_map
from .trainer import TrainConfig, train
from .evaluation import compute_metrics, count_cells, paired_ttest_onesided

__version__ = "0.1.0"

__all__ = [
    "Param", "ShapeError", "Tensor", "backward",
    "ParamStore", "build_params", "cfcrn_forward", "fcrn_forward",
    "CentroidList", "KernelSpec", "ProximitySpec", "density_map", "make_lrgt", "proximity_map",
    "TrainConfig", "train",
    "compute_metrics", "count_cells", "paired_ttest_onesided",
]
