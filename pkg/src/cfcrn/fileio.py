"""On-disk formats: tensors, checkpoints, rasters, annotations and run logs.

All binary formats are little-endian.

* Tensor (``DCT1``): 4-byte magic, four uint64 dims, float32 values row-major.
* Checkpoint (``DCKP``): 4-byte magic, uint64 parameter count, then per
  parameter a uint32 name length, the UTF-8 name and the tensor record.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np
from PIL import Image

TENSOR_MAGIC = b"DCT1"
CKPT_MAGIC = b"DCKP"
LOSSLESS_FORMATS = {".png": "PNG", ".tif": "TIFF", ".tiff": "TIFF", ".bmp": "BMP"}


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- tensors

def _as4(arr: np.ndarray) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim > 4:
        raise FormatError(f"tensor has {a.ndim} dims; the format stores at most 4")
    if a.ndim == 1:
        return a.reshape(1, -1, 1, 1)
    return a.reshape((1,) * (4 - a.ndim) + a.shape)


def write_tensor_to(fh: BinaryIO, arr: np.ndarray) -> None:
    a = _as4(arr)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<4Q", *a.shape))
    fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_tensor_from(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    dims = struct.unpack("<4Q", fh.read(32))
    n = int(np.prod(dims))
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor_to(fh, arr)


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor_from(fh)


# ------------------------------------------------------------ checkpoints

def write_checkpoint(path: str | Path, state: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_tensor_to(fh, arr)


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        (count,) = struct.unpack("<Q", fh.read(8))
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack("<I", fh.read(4))
            name = fh.read(ln).decode("utf-8")
            out[name] = read_tensor_from(fh)
        return out


def save_checkpoint(path: str | Path, params) -> None:
    """Write a ParamStore; the architecture is encoded as a pseudo-parameter."""
    meta = np.array([1.0 if params.arch == "cfcrn" else 0.0, float(params.has_aux),
                     float(params.width), float(params.in_channels)], dtype=np.float32)
    write_checkpoint(path, {"__meta__": meta, **params.state_dict()})


def load_checkpoint(path: str | Path):
    from .model import build_params

    state = read_checkpoint(path)
    meta = state.pop("__meta__", None)
    if meta is None:
        raise FormatError(f"{path}: checkpoint lacks architecture metadata")
    m = meta.ravel()
    params = build_params("cfcrn" if m[0] > 0.5 else "fcrn", 0, aux=bool(m[1] > 0.5),
                          width=float(m[2]), in_channels=int(round(m[3])))
    params.load_state_dict(state)
    return params


# ---------------------------------------------------------------- rasters

def read_image(path: str | Path) -> np.ndarray:
    """8-bit raster as ``(C, H, W)`` uint8; grayscale gives C=1, RGB(A) gives C=3 in R, G, B order."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.format not in LOSSLESS_FORMATS.values():
            raise OSError(f"{path}: unsupported image format {im.format}")
        if im.mode in ("L", "P", "1"):
            arr = np.asarray(im.convert("L"))[None]
        elif im.mode in ("RGB", "RGBA"):
            arr = np.asarray(im.convert("RGB")).transpose(2, 0, 1)
        else:
            raise OSError(f"{path}: unsupported pixel mode {im.mode}")
    return np.ascontiguousarray(arr, dtype=np.uint8)


def write_image(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    fmt = LOSSLESS_FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise OSError(f"{path}: unsupported image format {path.suffix or '(none)'}; use png, tif or bmp")
    a = np.asarray(image)
    if a.dtype != np.uint8:
        raise ValueError("only 8-bit images can be written")
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim == 3:
        if a.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) for colour images, got {a.shape}")
        im = Image.fromarray(np.ascontiguousarray(a.transpose(1, 2, 0)), "RGB")
    else:
        im = Image.fromarray(a, "L")
    im.save(path, format=fmt)


def density_to_png(path: str | Path, density: np.ndarray) -> None:
    d = np.asarray(density, dtype=np.float64).squeeze()
    top = d.max()
    scaled = np.zeros_like(d) if top <= 0 else d / top
    write_image(path, np.round(scaled * 255).astype(np.uint8))


# ------------------------------------------------------------ annotations

def write_annotations(path: str | Path, points: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in np.asarray(points).reshape(-1, 2):
            w.writerow([int(x), int(y)])


def read_annotations(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "y"]:
            raise FormatError(f"{path}: expected header 'x,y'")
        pts = [(int(r[0]), int(r[1])) for r in reader if r]
    return np.array(pts, dtype=np.int64).reshape(-1, 2)


# ------------------------------------------------------------ config / logs

def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def write_config(path: str | Path, values: dict) -> None:
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k} = {_format_value(v)}\n")


def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment. Values stay strings."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_loss_csv(path: str | Path, history: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_lcmb", "val_l"])
        for rec in history:
            w.writerow([rec["epoch"], repr(float(rec["train_lcmb"])), repr(float(rec.get("val_l", math.nan)))])


def read_loss_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "train_lcmb": float(r["train_lcmb"]), "val_l": float(r["val_l"])}
                for r in csv.DictReader(fh)]


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor_to(buf, arr)
    return buf.getvalue()
