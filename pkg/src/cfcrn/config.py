"""Run configuration stored as a flat ``key = value`` text file."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from . import fileio
from .targets import KernelSpec
from .trainer import TrainConfig


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.replace("(", "").replace(")", "").split(",") if x.strip())


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


_TRAIN_PARSERS = {
    "alpha": _floats, "lr_candidates": _floats, "lam": float, "beta": float, "lr": float,
    "batch_size": int, "epochs": int, "patches_per_image": int, "patch_size": int,
    "amplification": float, "rotation_range": float, "augment": _bool, "seed": int,
    "update_form": str, "probe_fraction": float, "val_every": int, "checkpoint_every": int,
}


@dataclass
class RunConfig:
    arch: str = "cfcrn"
    aux_enabled: bool = True
    width: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    data_dir: str = ""
    out_dir: str = ""
    val_fraction: float = 0.2
    select_lr: bool = False

    def __post_init__(self):
        if self.arch not in ("fcrn", "cfcrn"):
            raise ValueError(f"arch must be fcrn or cfcrn, got {self.arch!r}")
        if self.aux_enabled and self.arch != "cfcrn":
            raise ValueError("aux_enabled requires arch = cfcrn")

    def to_dict(self) -> dict:
        d = {"arch": self.arch, "aux_enabled": self.aux_enabled, "width": self.width,
             "sigma": self.kernel.sigma, "half_width": self.kernel.half_width,
             "data_dir": self.data_dir, "out_dir": self.out_dir, "val_fraction": self.val_fraction,
             "select_lr": self.select_lr}
        d.update(self.train.as_dict())
        return d

    def save(self, path: str | Path) -> None:
        fileio.write_config(path, self.to_dict())

    @classmethod
    def from_dict(cls, raw: dict[str, str]) -> "RunConfig":
        raw = dict(raw)
        tkw, top = {}, {}
        for k, v in raw.items():
            if k in _TRAIN_PARSERS:
                tkw[k] = _TRAIN_PARSERS[k](str(v))
            elif k in ("arch", "data_dir", "out_dir"):
                top[k] = str(v)
            elif k in ("aux_enabled", "select_lr"):
                top[k] = _bool(str(v))
            elif k in ("width", "val_fraction"):
                top[k] = float(v)
            elif k in ("sigma", "half_width"):
                pass
            else:
                raise ValueError(f"unknown configuration key {k!r}")
        kernel = KernelSpec(float(raw.get("sigma", 3.0)), int(raw.get("half_width", 10)))
        if "aux_enabled" not in top:
            top["aux_enabled"] = top.get("arch", "cfcrn") == "cfcrn"
        return cls(train=TrainConfig(**tkw), kernel=kernel, **top)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(fileio.read_config(path))
