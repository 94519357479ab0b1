"""Small dense-tensor library with reverse-mode automatic differentiation.

Only the handful of operations needed by the counting networks are provided:
same-padded convolution, ReLU, 2x2 max pooling, 2x bilinear up-sampling,
channel concatenation and a batch-mean squared error. Values are float32,
scalar losses are accumulated in float64 to keep finite-difference checks
meaningful.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """N-d array plus an optional autograd record.

    Network activations are 4-D ``(batch, channels, height, width)``. A tensor
    produced by an operation keeps references to its parents and a closure
    mapping the upstream gradient to one gradient per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: Sequence["Tensor"] = (),
                 _backward: Callable | None = None, op: str = ""):
        arr = np.asarray(data)
        if arr.ndim > 0 and arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def tracked(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__

    def backward(self) -> None:
        backward(self)


class Param(Tensor):
    """Trainable leaf tensor with a momentum buffer of the same shape."""

    __slots__ = ("name", "momentum")

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=DTYPE, order="C"), requires_grad=True)
        self.name = name
        self.momentum = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op) -> Tensor:
    parents = tuple(parents)
    if any(p.tracked for p in parents):
        return Tensor(data, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _check4(x: Tensor, name: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (batch, channels, height, width), got {x.shape}")


# ---------------------------------------------------------------- convolution

def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, h, w), dtype=xp.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(b, c * k * k, h * w)


def _col2im(cols: np.ndarray, c: int, k: int, h: int, w: int) -> np.ndarray:
    b = cols.shape[0]
    p = (k - 1) // 2
    cols = cols.reshape(b, c, k, k, h, w)
    out = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            out[:, :, dy:dy + h, dx:dx + w] += cols[:, :, dy, dx]
    return out[:, :, p:p + h, p:p + w] if p else out


def conv2d_same(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 convolution with zero padding ``(k-1)/2`` (spatial size preserved).

    ``weight`` has shape ``(C_out, C_in, k, k)`` with odd ``k``; ``bias`` is
    ``(C_out,)``. As in every deep-learning framework this is a
    cross-correlation.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    _check4(x, "input")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"kernels must be (C_out, C_in, k, k), got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")

    b, _, h, w = x.shape
    p = (k - 1) // 2
    w2 = weight.data.reshape(c_out, c_in * k * k)
    if k == 1:
        cols = x.data.reshape(b, c_in, h * w)
    else:
        cols = _im2col(_pad(x.data, p), k, h, w)
    out = np.matmul(w2, cols)
    out += bias.data[None, :, None]
    out = out.reshape(b, c_out, h, w)

    def _backward(g):
        g2 = g.reshape(b, c_out, h * w)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gb = g2.sum(axis=(0, 2))
        gcols = np.matmul(w2.T, g2)
        if k == 1:
            gx = gcols.reshape(b, c_in, h, w)
        else:
            gx = _col2im(gcols, c_in, k, h, w)
        return gx, gw, gb

    return _make(out, (x, weight, bias), _backward, "conv2d")


# ------------------------------------------------------------- elementwise

def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, DTYPE(0))
    return _make(out, (x,), lambda g: (g * mask,), "relu")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    if isinstance(s, Tensor):
        raise TypeError("scale multiplies by a python number only")
    s = float(s)
    data = a.data * s if a.data.ndim == 0 else a.data * DTYPE(s)
    return _make(data, (a,), lambda g: (g * s,), "scale")


def sum_squares(a: Tensor) -> Tensor:
    """Squared Euclidean norm of all entries, returned as a float64 scalar."""
    a = _as_tensor(a)
    val = np.float64(np.sum(np.square(a.data, dtype=np.float64)))
    return _make(val, (a,), lambda g: ((2.0 * float(g)) * a.data,), "sum_squares")


# ----------------------------------------------------------- resampling

def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties go to the first element in scan order."""
    x = _as_tensor(x)
    _check4(x, "input")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        gw = np.zeros((b, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(b, c, h, w),)

    return _make(out, (x,), _backward, "maxpool2")


def bilinear_matrix(n: int) -> np.ndarray:
    """``(2n, n)`` matrix doubling a 1-D signal, half-pixel centres, edge clamped."""
    m = np.zeros((2 * n, n), dtype=np.float64)
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m.astype(DTYPE)


def upsample_bilinear2(x: Tensor) -> Tensor:
    """Double height and width by separable bilinear interpolation."""
    x = _as_tensor(x)
    _check4(x, "input")
    _, _, h, w = x.shape
    uh, uw = bilinear_matrix(h), bilinear_matrix(w)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def _backward(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return _make(out, (x,), _backward, "upsample2")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check4(a, "a")
    _check4(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


# ---------------------------------------------------------------- losses

def mse_loss(pred: Tensor, target) -> Tensor:
    """``(1/B) * sum_b ||pred_b - target_b||^2`` as a float64 scalar."""
    pred = _as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ShapeError(f"prediction {pred.shape} and target {t.shape} differ")
    bsz = pred.shape[0] if pred.data.ndim else 1
    diff = pred.data.astype(np.float64) - t
    val = np.float64(np.sum(diff * diff) / bsz)
    diff32 = diff.astype(DTYPE)

    def _backward(g):
        return ((2.0 * float(g) / bsz) * diff32,)

    return _make(val, (pred,), _backward, "mse")


# --------------------------------------------------------------- autograd

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.tracked:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable trainable leaf.

    Intermediate gradients live only for the duration of the call, so repeated
    calls without clearing add exactly the same amount to each leaf.
    """
    if not isinstance(loss, Tensor) or not loss.tracked:
        raise RuntimeError("backward() called on a value that is not part of an autograd graph")
    if loss.data.size != 1:
        raise RuntimeError(f"backward() needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                g = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.tracked:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ------------------------------------------------------------ parameters

def orthogonal_init(shape: Sequence[int], rng: np.random.Generator, name: str = "w") -> Param:
    """Kernel whose ``(C_out, rest)`` flattening has orthonormal rows (or columns).

    QR of a standard-normal matrix with the sign of ``diag(R)`` folded back into
    ``Q`` so the result is uniformly distributed over orthogonal matrices.
    """
    shape = tuple(int(s) for s in shape)
    rows = shape[0]
    cols = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return Param(name, q.reshape(shape))


@contextmanager
def precision(dtype):
    """Temporarily change the value dtype (gradient checks run in float64)."""
    global DTYPE
    saved, DTYPE = DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = saved


def zeros_param(shape: Sequence[int], name: str = "b") -> Param:
    return Param(name, np.zeros(shape, dtype=DTYPE))


def sgd_momentum_step(params: Iterable[Param], lr: float, beta: float, lam: float,
                      form: str = "descent") -> None:
    """One momentum-SGD update with an l2 penalty, then clear gradients.

    ``g = grad + 2*lam*value``. In ``"descent"`` form the buffer tracks
    ``m <- beta*m + (1-beta)*lr*g`` and ``value <- value - m``. ``"literal"``
    flips the sign of the gradient term inside the buffer, which moves uphill;
    it exists only for auditing the published update rule.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {beta}")
    if form not in ("descent", "literal"):
        raise ValueError(f"unknown update form {form!r}")
    params = list(params)
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
    sign = 1.0 if form == "descent" else -1.0
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if lam:
            g = g + DTYPE(2.0 * lam) * p.data
        p.momentum *= DTYPE(beta)
        p.momentum += DTYPE(sign * (1.0 - beta) * lr) * g
        p.data -= p.momentum
        p.grad = None
