"""Dense float64 tensors with a reverse-mode gradient tape.

Operations record themselves on the active :class:`Tape` when any input
requires a gradient. Outside a tape every op is a plain numpy evaluation and
the result is detached. Shapes are never broadcast implicitly except for
scalar operands; row-vector biases go through :func:`add_row`.

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape():
        loss = tensor.sum(tensor.matmul(x, w))
        backward(loss)
    w.grad
"""

from __future__ import annotations

import contextlib
import math
from collections import Counter
from typing import Callable, Sequence

import numpy as np

from .errors import DetachedTensor, NonFinite, NotScalar, ShapeMismatch

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715
LAYER_NORM_EPS = 1e-12
NORM_EPS = 1e-12

_debug_nonfinite = False
_kink_log: list | None = None
_corrupted_ops: set[str] = set()
_tape_stack: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._index = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Append-only record of primitive applications.

    Node order is a valid topological order, so backward is a single reverse
    sweep. A tape is consumed by :func:`backward` and cannot be reused.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable, str]] = []
        self.consumed = False

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> None:
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append((out, parents, backward_fn, op))

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


@contextlib.contextmanager
def debug_nonfinite(enabled: bool = True):
    """Raise :class:`NonFinite` as soon as any op produces NaN or Inf."""
    global _debug_nonfinite
    previous, _debug_nonfinite = _debug_nonfinite, enabled
    try:
        yield
    finally:
        _debug_nonfinite = previous


@contextlib.contextmanager
def record_kinks():
    """Collect the discrete branch pattern (argmin/argmax, threshold masks) of
    every piecewise op evaluated inside the block. Two evaluations with equal
    logs lie on the same smooth piece."""
    global _kink_log
    previous, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = previous


@contextlib.contextmanager
def corrupt_backward(*ops: str):
    """Test hook: scale the backward rule of the named ops by 1.5."""
    added = set(ops) - _corrupted_ops
    _corrupted_ops.update(added)
    try:
        yield
    finally:
        _corrupted_ops.difference_update(added)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    if _debug_nonfinite and not np.all(np.isfinite(data)):
        raise NonFinite(f"{op} produced a non-finite value")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn, op)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or tape.consumed:
        raise DetachedTensor("loss is not on a live gradient tape")
    grads: dict[int, np.ndarray] = {loss._index: np.ones_like(loss.data)}
    for idx in range(loss._index, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        _, parents, backward_fn, op = tape.nodes[idx]
        parent_grads = backward_fn(g)
        if op in _corrupted_ops:
            parent_grads = tuple(None if pg is None else 1.5 * pg for pg in parent_grads)
        for parent, pg in zip(parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._tape is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif parent._tape is tape:
                j = parent._index
                grads[j] = grads[j] + pg if j in grads else pg
    tape.consumed = True
    tape.nodes.clear()


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ShapeMismatch(message)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m, k) @ (k, n), (k,) @ (k, n), or the dot product (k,) @ (k,)."""
    _require(a.ndim in (1, 2) and b.ndim in (1, 2) and a.shape[-1] == b.shape[0]
             and not (a.ndim == 2 and b.ndim == 1), f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        if bd.ndim == 1:
            return g * bd, g * ad
        da = g @ bd.T if a.requires_grad else None
        db = None
        if b.requires_grad:
            db = np.outer(ad, g) if ad.ndim == 1 else ad.T @ g
        return da, db

    return _make(ad @ bd, (a, b), bw, "matmul")


def transpose(x: Tensor) -> Tensor:
    _require(x.ndim == 2, f"transpose needs 2-D, got {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 0:
        return _make(a.data + b.data, (a, b), lambda g: (g, np.asarray(g.sum())), "add")
    if a.ndim == 0:
        return add(b, a)
    raise ShapeMismatch(f"add {a.shape} + {b.shape}")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require(a.shape == b.shape, f"sub {a.shape} - {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """Add a (d,) vector to every row of an (n, d) matrix."""
    _require(x.ndim == 2 and row.ndim == 1 and x.shape[1] == row.shape[0],
             f"add_row {x.shape} + {row.shape}")
    return _make(x.data + row.data, (x, row), lambda g: (g, g.sum(axis=0)), "add_row")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if a.shape == b.shape:
        return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    if b.ndim == 0:
        return _make(ad * bd, (a, b), lambda g: (g * bd, np.asarray((g * ad).sum())), "mul")
    if a.ndim == 0:
        return mul(b, a)
    raise ShapeMismatch(f"mul {a.shape} * {b.shape}")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def div_rows(x: Tensor, v: Tensor) -> Tensor:
    """Divide row i of an (m, d) matrix by v[i]."""
    _require(x.ndim == 2 and v.ndim == 1 and x.shape[0] == v.shape[0], f"div_rows {x.shape} / {v.shape}")
    xd, vd = x.data, v.data[:, None]
    out = xd / vd

    def bw(g):
        return g / vd, -(g * out).sum(axis=1) / v.data

    return _make(out, (x, v), bw, "div_rows")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    t = np.tanh(GELU_C * (xd + GELU_A * xd**3))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _make(out, (x,), bw, "gelu")


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    _require(len(tensors) > 0, "concat of nothing")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    tensors = tuple(tensors)
    _require(len(tensors) > 0 and all(t.shape == tensors[0].shape for t in tensors), "stack shapes differ")
    out = np.stack([t.data for t in tensors])
    return _make(out, tensors, lambda g: tuple(g[i] for i in range(len(tensors))), "stack")


def take(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing (``slice`` and row gathers)."""
    if isinstance(index, list):
        index = np.asarray(index, dtype=np.int64)
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeMismatch(f"index into {x.shape}: {exc}") from None
    shape = x.shape

    def bw(g):
        z = np.zeros(shape)
        np.add.at(z, index, g)
        return (z,)

    return _make(np.array(out, dtype=np.float64), (x,), bw, "slice")


slice_ = take


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    _require(table.ndim == 2 and ids.ndim == 1, f"embedding_lookup {table.shape}[{ids.shape}]")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(f"token id out of range for vocabulary of {table.shape[0]}")
    shape = table.shape

    def bw(g):
        z = np.zeros(shape)
        np.add.at(z, ids, g)
        return (z,)

    return _make(table.data[ids], (table,), bw, "embedding_lookup")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")
    axis = axis % x.ndim
    return _make(x.data.sum(axis=axis), (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------- row-wise nonlinear ops


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize along the last axis, then apply the optional affine ``gamma``/``beta``."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat
    parents: tuple[Tensor, ...] = (x,)
    if gamma is not None:
        _require(gamma.shape == (xd.shape[-1],) and beta is not None and beta.shape == gamma.shape,
                 "layer_norm affine parameters must both be (d,)")
        out = xhat * gamma.data + beta.data
        parents = (x, gamma, beta)
    reduce_axes = tuple(range(xd.ndim - 1))

    def bw(g):
        dxhat = g * gamma.data if gamma is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gamma is None:
            return (dx,)
        return dx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return _make(out, parents, bw, "layer_norm")


def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),), "softmax_rows")


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Per-row cross-entropy ``logsumexp(row) - row[target]``; returns shape (m,)."""
    targets = np.asarray(targets, dtype=np.int64)
    _require(logits.ndim == 2 and targets.shape == (logits.shape[0],),
             f"cross_entropy_rows {logits.shape} vs targets {targets.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(targets))
    out = lse - z[rows, targets]

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * g[:, None],)

    return _make(out, (logits,), bw, "cross_entropy_rows")


def cosine_similarity_rows(a: Tensor, b: Tensor) -> Tensor:
    """(m, d) x (n, d) -> (m, n) matrix of pairwise cosine similarities."""
    _require(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[1],
             f"cosine_similarity_rows {a.shape} vs {b.shape}")
    na = np.maximum(np.linalg.norm(a.data, axis=1, keepdims=True), NORM_EPS)
    nb = np.maximum(np.linalg.norm(b.data, axis=1, keepdims=True), NORM_EPS)
    ua, ub = a.data / na, b.data / nb
    out = ua @ ub.T

    def bw(g):
        dua, dub = g @ ub, g.T @ ua
        da = (dua - ua * (dua * ua).sum(axis=1, keepdims=True)) / na
        db = (dub - ub * (dub * ub).sum(axis=1, keepdims=True)) / nb
        return da, db

    return _make(out, (a, b), bw, "cosine_similarity_rows")


def min_max_normalize_rows(x: Tensor, counters: Counter | None = None) -> Tensor:
    """Affinely map each row of a 2-D tensor onto [0, 1].

    A constant row maps to zeros and increments ``counters["degenerate_rows"]``.
    """
    _require(x.ndim == 2 and x.shape[1] > 0, f"min_max_normalize_rows needs (m, n>0), got {x.shape}")
    xd = x.data
    lo_idx = xd.argmin(axis=1)
    hi_idx = xd.argmax(axis=1)
    rows = np.arange(xd.shape[0])
    lo, hi = xd[rows, lo_idx], xd[rows, hi_idx]
    span = hi - lo
    ok = span > 0
    safe = np.where(ok, span, 1.0)
    out = np.where(ok[:, None], (xd - lo[:, None]) / safe[:, None], 0.0)
    degenerate = int((~ok).sum())
    if counters is not None and degenerate:
        counters["degenerate_rows"] += degenerate
    if _kink_log is not None:
        _kink_log.append(("minmax", lo_idx.tobytes(), hi_idx.tobytes(), ok.tobytes()))

    def bw(g):
        inv = np.where(ok, 1.0 / safe, 0.0)
        dx = g * inv[:, None]
        np.add.at(dx, (rows, lo_idx), (g * (out - 1.0)).sum(axis=1) * inv)
        np.add.at(dx, (rows, hi_idx), -(g * out).sum(axis=1) * inv)
        return (dx,)

    return _make(out, (x,), bw, "min_max_normalize_rows")


def threshold_rows(x: Tensor, theta: float) -> Tensor:
    """Zero every entry below ``theta``; gradient flows only through survivors."""
    keep = x.data >= theta
    if _kink_log is not None:
        _kink_log.append(("threshold", keep.tobytes()))
    return _make(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,), "threshold_rows")
