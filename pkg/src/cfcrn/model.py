"""FCRN and concatenated FCRN (C-FCRN) graphs with auxiliary density heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import (Param, ShapeError, Tensor, concat_channels, conv2d_same, maxpool2,
                     orthogonal_init, relu, upsample_bilinear2, zeros_param)

KERNEL_COUNTS = (32, 64, 128, 512, 128, 64, 32, 1)
AUX_WIDTH = 32
MAIN_GROUPS = ("theta1", "theta2", "theta3", "theta4")
AUX_GROUPS = ("aux1", "aux2", "aux3")
BLOCK_GROUP = {1: "theta1", 2: "theta1", 3: "theta1", 4: "theta1",
               5: "theta2", 6: "theta3", 7: "theta4", 8: "theta4"}
ARCHS = ("fcrn", "cfcrn")


class ParamStore:
    """Trainable tensors partitioned into the main-network and aux-head groups."""

    def __init__(self, arch: str, groups: dict[str, list[Param]], width: float = 1.0,
                 in_channels: int = 3):
        self.arch = arch
        self.groups = groups
        self.width = width
        self.in_channels = in_channels
        names = [p.name for p in self]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names in store")
        self._by_name = {p.name: p for p in self}

    def __iter__(self):
        for g in self.groups.values():
            yield from g

    def __getitem__(self, name: str) -> Param:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __len__(self) -> int:
        return len(self._by_name)

    @property
    def has_aux(self) -> bool:
        return any(self.groups.get(g) for g in AUX_GROUPS)

    def group(self, name: str) -> list[Param]:
        return self.groups.get(name, [])

    def main_params(self) -> list[Param]:
        return [p for g in MAIN_GROUPS for p in self.group(g)]

    def aux_params(self) -> list[Param]:
        return [p for g in AUX_GROUPS for p in self.group(g)]

    def num_parameters(self, aux: bool = True) -> int:
        ps = list(self) if aux else self.main_params()
        return int(sum(p.data.size for p in ps))

    def zero_grad(self) -> None:
        for p in self:
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._by_name) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, arr in state.items():
            if name not in self._by_name:
                raise KeyError(f"checkpoint has unknown parameter {name!r}")
            p = self._by_name[name]
            if arr.size != p.data.size:
                raise ShapeError(f"{name}: checkpoint size {arr.size} != {p.data.size}")
            p.data = np.asarray(arr, dtype=p.data.dtype).reshape(p.shape).copy()
            p.momentum = np.zeros_like(p.data)
            p.grad = None


@dataclass
class ForwardOutput:
    density: Tensor
    aux_maps: list[Tensor] | None = None
    taps: list[Tensor] = field(default_factory=list)


def block_channels(width: float = 1.0) -> tuple[int, ...]:
    """Kernel counts per block, optionally scaled down for desk-scale runs."""
    return tuple(max(1, int(round(c * width))) for c in KERNEL_COUNTS[:7]) + (1,)


def _conv(name: str, c_out: int, c_in: int, k: int, rng) -> list[Param]:
    return [orthogonal_init((c_out, c_in, k, k), rng, f"{name}.w"), zeros_param((c_out,), f"{name}.b")]


def build_params(arch: str = "cfcrn", seed: int = 0, aux: bool | None = None,
                 width: float = 1.0, in_channels: int = 3) -> ParamStore:
    """Orthogonally initialised kernels, zero biases and momenta.

    Main-network kernels are drawn before the aux heads from the same stream,
    so C-FCRN stores with and without aux heads share identical main weights.
    """
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    if aux is None:
        aux = arch == "cfcrn"
    if aux and arch != "cfcrn":
        raise ValueError("auxiliary heads are only defined for the cfcrn architecture")
    rng = np.random.default_rng(seed)
    ch = block_channels(width)
    cat = arch == "cfcrn"
    c_in = [in_channels, ch[0], ch[1], ch[2],
            ch[3] + (ch[2] if cat else 0),
            ch[4] + (ch[1] if cat else 0),
            ch[5] + (ch[0] if cat else 0),
            ch[6]]
    groups: dict[str, list[Param]] = {g: [] for g in MAIN_GROUPS}
    for i in range(8):
        k = 1 if i == 7 else 3
        groups[BLOCK_GROUP[i + 1]] += _conv(f"block{i + 1}", ch[i], c_in[i], k, rng)
    if aux:
        aw = max(1, int(round(AUX_WIDTH * width)))
        for j, tap_ch in enumerate((ch[3], ch[4], ch[5]), start=1):
            groups[f"aux{j}"] = _conv(f"aux{j}.conv1", aw, tap_ch, 3, rng) + _conv(f"aux{j}.conv2", 1, aw, 1, rng)
    return ParamStore(arch, groups, width=width, in_channels=in_channels)


def _cbr(x: Tensor, params: ParamStore, name: str) -> Tensor:
    return relu(conv2d_same(x, params[f"{name}.w"], params[f"{name}.b"]))


def _check_input(x: Tensor, params: ParamStore) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"input must be (batch, channels, height, width), got {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, network expects {params.in_channels}")
    if x.shape[2] % 8 or x.shape[3] % 8:
        raise ShapeError(f"input spatial size {x.shape[2]}x{x.shape[3]} must be divisible by 8")


def aux_forward(tap: Tensor, params: ParamStore, k: int) -> Tensor:
    return _cbr(_cbr(tap, params, f"aux{k}.conv1"), params, f"aux{k}.conv2")


def cfcrn_forward(x: Tensor, params: ParamStore, with_aux: bool = True) -> ForwardOutput:
    """Eight-block C-FCRN; the shortcut from the matching down-path block is
    concatenated at the input of each up-sampling block, before its UP layer."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_input(x, params)
    if params.arch != "cfcrn":
        raise ValueError("cfcrn_forward needs a cfcrn parameter store")
    b1 = maxpool2(_cbr(x, params, "block1"))
    b2 = maxpool2(_cbr(b1, params, "block2"))
    b3 = maxpool2(_cbr(b2, params, "block3"))
    b4 = _cbr(b3, params, "block4")
    b5 = _cbr(upsample_bilinear2(concat_channels(b4, b3)), params, "block5")
    b6 = _cbr(upsample_bilinear2(concat_channels(b5, b2)), params, "block6")
    b7 = _cbr(upsample_bilinear2(concat_channels(b6, b1)), params, "block7")
    density = _cbr(b7, params, "block8")
    taps = [b4, b5, b6]
    aux_maps = None
    if with_aux:
        if not params.has_aux:
            raise ValueError("parameter store has no auxiliary heads")
        aux_maps = [aux_forward(t, params, k) for k, t in enumerate(taps, start=1)]
    return ForwardOutput(density=density, aux_maps=aux_maps, taps=taps)


def fcrn_forward(x: Tensor, params: ParamStore) -> Tensor:
    """Plain FCRN ladder: same blocks, no shortcuts, no aux heads."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_input(x, params)
    if params.arch != "fcrn":
        raise ValueError("fcrn_forward needs an fcrn parameter store")
    h = maxpool2(_cbr(x, params, "block1"))
    h = maxpool2(_cbr(h, params, "block2"))
    h = maxpool2(_cbr(h, params, "block3"))
    h = _cbr(h, params, "block4")
    for blk in ("block5", "block6", "block7"):
        h = _cbr(upsample_bilinear2(h), params, blk)
    return _cbr(h, params, "block8")


def forward(x: Tensor, params: ParamStore, with_aux: bool = False) -> ForwardOutput:
    """Dispatch on the store's architecture."""
    if params.arch == "fcrn":
        return ForwardOutput(density=fcrn_forward(x, params))
    return cfcrn_forward(x, params, with_aux=with_aux and params.has_aux)


def predict_density(x, params: ParamStore) -> np.ndarray:
    return forward(x if isinstance(x, Tensor) else Tensor(x), params).density.data
