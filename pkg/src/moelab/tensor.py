"""Dense float64 tensors with taped reverse-mode differentiation.

Everything numeric in the package runs through this module: a `Tensor`
wraps a row-major numpy float64 array, operations record themselves on
the active `GradTape`, and `backward` replays the tape in reverse to
accumulate adjoints. There is no broadcasting beyond scalar-vs-tensor;
the handful of structured ops (row-wise scaling, gathers, triangular
fills) carry hand-written adjoints instead.

The module-level `flops` counter prices a matmul at exactly 2*p*r*q and
every binary elementwise arithmetic op at one flop per output element.
Unary maps, reductions and data movement are free, matching the
accounting convention used by the efficiency analysis in the harness.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import NumericError, ShapeError, UsageError

__all__ = [
    "Tensor",
    "GradTape",
    "active_tape",
    "use_tape",
    "no_grad",
    "grad_enabled",
    "flops",
    "FlopCounter",
    "matmul",
    "add",
    "subtract",
    "multiply",
    "divide",
    "scale",
    "exp",
    "log",
    "sigmoid",
    "silu",
    "sqrt",
    "tsum",
    "mean",
    "softmax",
    "log_sum_exp",
    "standardize",
    "reshape",
    "take",
    "take_rows",
    "scatter_rows",
    "take_cols_rowwise",
    "rowwise_mul",
    "diag_part",
    "lower_triangular",
    "fc_sample_rows",
    "backward",
    "grad_check",
]


class FlopCounter:
    """Running count of priced floating-point operations."""

    def __init__(self) -> None:
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)

    def reset(self) -> None:
        self.total = 0


flops = FlopCounter()


class _TapeEntry:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out: "Tensor", inputs: tuple, fn: Callable[[np.ndarray], None]):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class GradTape:
    """Ordered record of executed operations.

    Execution order is a topological order of the graph, so replaying
    entries in reverse visits consumers before producers. A cleared tape
    accumulates nothing. Training loops clear the tape once per step.
    """

    def __init__(self) -> None:
        self._entries: list[_TapeEntry] = []

    def record(self, out: "Tensor", inputs: tuple, fn) -> None:
        self._entries.append(_TapeEntry(out, inputs, fn))

    def clear(self) -> None:
        self._entries.clear()

    def __len__(self) -> int:
        return len(self._entries)


_active_tape = GradTape()
_grad_enabled = True


def active_tape() -> GradTape:
    return _active_tape


@contextlib.contextmanager
def use_tape(tape: GradTape):
    """Swap in a tape for the duration of the context."""
    global _active_tape
    prev = _active_tape
    _active_tape = tape
    try:
        yield tape
    finally:
        _active_tape = prev


@contextlib.contextmanager
def no_grad():
    """Disable taping; operations inside produce untracked tensors."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "track")

    def __init__(self, data, track: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.track = bool(track)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, track=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, track={self.track})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_SINK: list[dict[int, list]] = []


def _accum(t: "Tensor", g: np.ndarray) -> None:
    sink = _SINK[-1]
    rec = sink.get(id(t))
    if rec is None:
        sink[id(t)] = [t, np.array(g, dtype=np.float64, copy=True)]
    else:
        rec[1] += g


def _record(out: Tensor, inputs: Sequence[Tensor], fn) -> Tensor:
    if _grad_enabled and any(t.track for t in inputs):
        out.track = True
        _active_tape.record(out, tuple(inputs), fn)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; accepts 1-D operands as row/column vectors.

    Increments the flop counter by 2*p*r*q for the underlying
    (p x r) @ (r x q) product.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} and {b.shape}")
    A = a.data if a.ndim == 2 else a.data[None, :]
    B = b.data if b.ndim == 2 else b.data[:, None]
    if A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    p, r = A.shape
    q = B.shape[1]
    flops.add(2 * p * r * q)
    Y = A @ B
    if a.ndim == 1:
        Y = Y[0]
    if b.ndim == 1:
        Y = Y[..., 0]
    out = Tensor(Y)

    def bw(g: np.ndarray) -> None:
        G = g.reshape(p, q)
        if a.track:
            ga = G @ B.T
            _accum(a, ga[0] if a.ndim == 1 else ga)
        if b.track:
            gb = A.T @ G
            _accum(b, gb[:, 0] if b.ndim == 1 else gb)

    return _record(out, (a, b), bw)


def _binary_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"elementwise shapes disagree: {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # adjoint of scalar broadcast: sum everything back into the scalar
    if t.shape == g.shape:
        return g
    return np.full(t.shape, g.sum())


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    out = Tensor(a.data + b.data)
    flops.add(out.size)

    def bw(g):
        if a.track:
            _accum(a, _reduce_to(g, a))
        if b.track:
            _accum(b, _reduce_to(g, b))

    return _record(out, (a, b), bw)


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    out = Tensor(a.data - b.data)
    flops.add(out.size)

    def bw(g):
        if a.track:
            _accum(a, _reduce_to(g, a))
        if b.track:
            _accum(b, _reduce_to(-g, b))

    return _record(out, (a, b), bw)


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    out = Tensor(a.data * b.data)
    flops.add(out.size)

    def bw(g):
        if a.track:
            _accum(a, _reduce_to(g * b.data, a))
        if b.track:
            _accum(b, _reduce_to(g * a.data, b))

    return _record(out, (a, b), bw)


def divide(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    if np.any(b.data == 0.0):
        raise NumericError("division by zero")
    out = Tensor(a.data / b.data)
    flops.add(out.size)

    def bw(g):
        if a.track:
            _accum(a, _reduce_to(g / b.data, a))
        if b.track:
            _accum(b, _reduce_to(-g * a.data / (b.data * b.data), b))

    return _record(out, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    flops.add(out.size)

    def bw(g):
        if a.track:
            _accum(a, g * c)

    return _record(out, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)

    def bw(g):
        if a.track:
            _accum(a, g * y)

    return _record(out, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericError("log of non-positive value")
    out = Tensor(np.log(a.data))

    def bw(g):
        if a.track:
            _accum(a, g / a.data)

    return _record(out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)

    def bw(g):
        if a.track:
            _accum(a, g * y * (1.0 - y))

    return _record(out, (a,), bw)


def silu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(x * s)

    def bw(g):
        if a.track:
            _accum(a, g * s * (1.0 + x * (1.0 - s)))

    return _record(out, (a,), bw)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise NumericError("sqrt of negative value")
    y = np.sqrt(a.data)
    out = Tensor(y)

    def bw(g):
        if a.track:
            _accum(a, g * 0.5 / np.maximum(y, 1e-300))

    return _record(out, (a,), bw)


def tsum(a, axis: int | None = None) -> Tensor:
    """Sum over all entries (axis=None, scalar output) or one axis."""
    a = _as_tensor(a)
    if axis is None:
        out = Tensor(a.data.sum())

        def bw(g):
            if a.track:
                _accum(a, np.full(a.shape, float(g)))

        return _record(out, (a,), bw)
    out = Tensor(a.data.sum(axis=axis))

    def bw_axis(g):
        if a.track:
            _accum(a, np.expand_dims(g, axis).repeat(a.shape[axis], axis=axis))

    return _record(out, (a,), bw_axis)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax along `axis`; rejects non-finite input."""
    a = _as_tensor(a)
    if not np.isfinite(a.data).all():
        raise NumericError("softmax input is not finite")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g):
        if a.track:
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(a, y * (g - dot))

    return _record(out, (a,), bw)


def log_sum_exp(a, axis: int = -1) -> Tensor:
    """Stable log(sum(exp(x))) along `axis`."""
    a = _as_tensor(a)
    if not np.isfinite(a.data).all():
        raise NumericError("log_sum_exp input is not finite")
    m = a.data.max(axis=axis, keepdims=True)
    y = (m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))).squeeze(axis)
    out = Tensor(y)
    sm = np.exp(a.data - m)
    sm = sm / sm.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.track:
            _accum(a, np.expand_dims(g, axis) * sm)

    return _record(out, (a,), bw)


def standardize(a, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Zero-mean unit-variance standardisation along `axis`."""
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=axis, keepdims=True)
    s = np.sqrt(var + eps)
    y = d / s
    out = Tensor(y)

    def bw(g):
        if a.track:
            gm = g.mean(axis=axis, keepdims=True)
            gy = (g * y).mean(axis=axis, keepdims=True)
            _accum(a, (g - gm - y * gy) / s)

    return _record(out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bw(g):
        if a.track:
            _accum(a, g.reshape(a.shape))

    return _record(out, (a,), bw)


def take(a, indices) -> Tensor:
    """Gather entries of a 1-D tensor."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[idx])

    def bw(g):
        if a.track:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf)

    return _record(out, (a,), bw)


def take_rows(a, rows) -> Tensor:
    """Gather rows of a 2-D tensor."""
    a = _as_tensor(a)
    idx = np.asarray(rows, dtype=np.intp)
    out = Tensor(a.data[idx])

    def bw(g):
        if a.track:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf)

    return _record(out, (a,), bw)


def scatter_rows(values, rows, total: int) -> Tensor:
    """Build a (total x C) tensor whose given rows hold `values` (duplicates add)."""
    values = _as_tensor(values)
    idx = np.asarray(rows, dtype=np.intp)
    buf = np.zeros((total,) + values.shape[1:], dtype=np.float64)
    np.add.at(buf, idx, values.data)
    out = Tensor(buf)

    def bw(g):
        if values.track:
            _accum(values, g[idx])

    return _record(out, (values,), bw)


def take_cols_rowwise(a, idx) -> Tensor:
    """Per-row column gather: out[r, k] = a[r, idx[r, k]]."""
    a = _as_tensor(a)
    ix = np.asarray(idx, dtype=np.intp)
    out = Tensor(np.take_along_axis(a.data, ix, axis=1))
    rows = np.arange(a.shape[0])[:, None]

    def bw(g):
        if a.track:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (rows, ix), g)
            _accum(a, buf)

    return _record(out, (a,), bw)


def rowwise_mul(a, v) -> Tensor:
    """Scale each row of a (R x C) tensor by the matching entry of a length-R vector."""
    a, v = _as_tensor(a), _as_tensor(v)
    if a.ndim != 2 or v.shape != (a.shape[0],):
        raise ShapeError(f"rowwise_mul expects (R,C) and (R,), got {a.shape} and {v.shape}")
    out = Tensor(a.data * v.data[:, None])
    flops.add(out.size)

    def bw(g):
        if a.track:
            _accum(a, g * v.data[:, None])
        if v.track:
            _accum(v, (g * a.data).sum(axis=1))

    return _record(out, (a, v), bw)


def diag_part(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diag_part expects a square matrix, got {a.shape}")
    n = a.shape[0]
    out = Tensor(np.diagonal(a.data).copy())

    def bw(g):
        if a.track:
            buf = np.zeros_like(a.data)
            buf[np.arange(n), np.arange(n)] = g
            _accum(a, buf)

    return _record(out, (a,), bw)


def _tril_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.tril_indices(n)


def lower_triangular(raw, n: int, exp_diag: bool = True) -> Tensor:
    """Fill a lower-triangular (n x n) matrix row-wise from a flat vector.

    With exp_diag the diagonal entries are exponentiated, guaranteeing a
    valid Cholesky factor for any raw input.
    """
    raw = _as_tensor(raw)
    m = n * (n + 1) // 2
    if raw.shape != (m,):
        raise ShapeError(f"lower_triangular expects length {m} for n={n}, got {raw.shape}")
    rows, cols = _tril_indices(n)
    vals = raw.data.copy()
    diag_mask = rows == cols
    if exp_diag:
        vals = np.where(diag_mask, np.exp(vals), vals)
    L = np.zeros((n, n))
    L[rows, cols] = vals
    out = Tensor(L)

    def bw(g):
        if raw.track:
            gv = g[rows, cols]
            if exp_diag:
                gv = np.where(diag_mask, gv * vals, gv)
            _accum(raw, gv)

    return _record(out, (raw,), bw)


def fc_sample_rows(raw, eps: np.ndarray, n: int) -> Tensor:
    """Batched Cholesky draw: row r yields L(raw[r]) @ eps[r].

    raw is (R, n(n+1)/2) with exponentiated diagonal entries; eps is a
    constant (R, n) noise matrix. Counts 2*R*n*n flops for the matvecs.
    """
    raw = _as_tensor(raw)
    m = n * (n + 1) // 2
    if raw.ndim != 2 or raw.shape[1] != m:
        raise ShapeError(f"fc_sample_rows expects (R,{m}), got {raw.shape}")
    R = raw.shape[0]
    rows, cols = _tril_indices(n)
    diag_mask = rows == cols
    vals = raw.data.copy()
    vals[:, diag_mask] = np.exp(vals[:, diag_mask])
    Ls = np.zeros((R, n, n))
    Ls[:, rows, cols] = vals
    flops.add(2 * R * n * n)
    y = np.einsum("rij,rj->ri", Ls, eps)
    out = Tensor(y)

    def bw(g):
        if raw.track:
            dL = np.einsum("ri,rj->rij", g, eps)
            gv = dL[:, rows, cols]
            gv[:, diag_mask] *= vals[:, diag_mask]
            _accum(raw, gv)

    return _record(out, (raw,), bw)


def backward(out: Tensor, tape: GradTape | None = None) -> None:
    """Accumulate d(out)/d(ancestor) into every tracked ancestor's grad.

    Repeated calls without zeroing add on top of existing gradients.
    """
    if out.size != 1:
        raise UsageError(f"backward requires a scalar root, got shape {out.shape}")
    if not out.track:
        raise UsageError("backward requires a tracked root tensor")
    tape = tape if tape is not None else _active_tape
    entries = tape._entries
    # Adjoints flow through a scratch map so each backward call deposits
    # exactly one gradient copy; reverse execution order is topological.
    scratch: dict[int, list] = {id(out): [out, np.ones_like(out.data)]}
    _SINK.append(scratch)
    try:
        for e in reversed(entries):
            rec = scratch.get(id(e.out))
            if rec is not None:
                e.fn(rec[1])
    finally:
        _SINK.pop()
    for t, g in scratch.values():
        if t.track:
            t.accumulate(g)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Max relative disagreement between taped and central-difference gradients.

    Returns max_i |analytic_i - numeric_i| / (|analytic_i| + 1e-8).
    """
    probe = Tensor(x.data.copy(), track=True)
    with use_tape(GradTape()):
        y = f(probe)
        backward(y)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(probe).item()
            flat[i] = orig - h
            lo = f(probe).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
