"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records every differentiable operation executed while it is
active (use it as a context manager).  ``backward`` replays the records
once, in reverse order, accumulating gradients into every array that
requires them.  ``DiffArray`` is a dumb container; all semantics live in
the op functions below.

Broadcasting is restricted to scalar-with-array for the elementwise ops.
Row-vector broadcasts get their own explicitly named ops (``add_rowvec``,
``mul_rowvec``) so shape bugs surface at op boundaries.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DiffArray",
    "Tape",
    "backward",
    "leaf",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "clip_min",
    "matmul",
    "transpose",
    "reshape",
    "tanh",
    "sigmoid",
    "leaky_relu",
    "exp",
    "log",
    "logaddexp",
    "softmax",
    "log_softmax",
    "concat",
    "stack_rows",
    "take",
    "reduce_sum",
    "reduce_mean",
    "reduce_var",
    "masked_mean",
    "add_rowvec",
    "mul_rowvec",
]

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "sa2sr_active_tape", default=None
)


class DiffArray:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"DiffArray(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; plain numbers/arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return _getitem(self, key)


class Tape:
    """Ordered record of operations for exactly one backward pass."""

    def __init__(self):
        self._records: list[tuple[DiffArray, Callable[[np.ndarray], None]]] = []
        self._consumed = False
        self._token = None

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False


def leaf(values, requires_grad: bool = True) -> DiffArray:
    """Create a gradient-carrying input array."""
    return DiffArray(values, requires_grad=requires_grad)


def constant(values) -> DiffArray:
    """Create an array that never receives gradients."""
    return DiffArray(values, requires_grad=False)


def _wrap(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(np.asarray(x, dtype=np.float64))


def _emit(values: np.ndarray, parents: Sequence[DiffArray], backward_fn) -> DiffArray:
    """Build the op output and, if a tape is active, record its backward rule."""
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = DiffArray(values, requires_grad=needs)
    if needs:
        tape._records.append((out, backward_fn))
    return out


def _accum(node: DiffArray, g) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad += g


def backward(tape: Tape, root: DiffArray) -> None:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf on the tape.

    The root must be scalar-shaped and the tape can be replayed only once.
    """
    if tape._consumed:
        raise ValueError("tape already consumed by a previous backward pass")
    if root.shape != ():
        raise ValueError(f"backward root must be scalar-shaped, got shape {root.shape}")
    tape._consumed = True
    root.grad = np.asarray(1.0)
    for out, backward_fn in reversed(tape._records):
        g = out.grad
        if g is None:
            continue  # dead branch: never contributed to the root
        backward_fn(g)
        out.grad = None  # free intermediate gradients as soon as they are consumed
    root.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_elementwise(a: DiffArray, b: DiffArray, op: str) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Only scalar-with-array broadcasting exists, so a mismatch means the
    # operand was the scalar side.
    return g if g.shape == shape else np.asarray(g.sum())


def add(a: DiffArray, b: DiffArray) -> DiffArray:
    _check_elementwise(a, b, "add")
    av, bv = a.values, b.values

    def bwd(g):
        _accum(a, _fit(g, av.shape))
        _accum(b, _fit(g, bv.shape))

    return _emit(av + bv, (a, b), bwd)


def sub(a: DiffArray, b: DiffArray) -> DiffArray:
    _check_elementwise(a, b, "sub")
    av, bv = a.values, b.values

    def bwd(g):
        _accum(a, _fit(g, av.shape))
        _accum(b, _fit(-g, bv.shape))

    return _emit(av - bv, (a, b), bwd)


def mul(a: DiffArray, b: DiffArray) -> DiffArray:
    _check_elementwise(a, b, "mul")
    av, bv = a.values, b.values

    def bwd(g):
        _accum(a, _fit(g * bv, av.shape))
        _accum(b, _fit(g * av, bv.shape))

    return _emit(av * bv, (a, b), bwd)


def div(a: DiffArray, b: DiffArray) -> DiffArray:
    _check_elementwise(a, b, "div")
    av, bv = a.values, b.values
    if np.any(bv == 0.0):
        raise ValueError("div: domain violation (zero denominator)")

    def bwd(g):
        _accum(a, _fit(g / bv, av.shape))
        _accum(b, _fit(-g * av / (bv * bv), bv.shape))

    return _emit(av / bv, (a, b), bwd)


def neg(a: DiffArray) -> DiffArray:
    def bwd(g):
        _accum(a, -g)

    return _emit(-a.values, (a,), bwd)


def power(a: DiffArray, p: float) -> DiffArray:
    """Elementwise a**p for a constant real exponent."""
    av = a.values
    p = float(p)
    if p != round(p) or p < 0:
        if np.any(av <= 0.0):
            raise ValueError("power: domain violation (non-positive base)")
    out = av**p

    def bwd(g):
        _accum(a, g * p * av ** (p - 1.0))

    return _emit(out, (a,), bwd)


def clip_min(a: DiffArray, floor: float) -> DiffArray:
    """max(a, floor) elementwise; gradient passes only where a > floor."""
    av = a.values
    keep = av > floor

    def bwd(g):
        _accum(a, g * keep)

    return _emit(np.maximum(av, floor), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    av, bv = a.values, b.values
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ValueError(f"matmul: shape mismatch {av.shape} vs {bv.shape}")

        def bwd(g):
            _accum(a, g @ bv.T)
            _accum(b, av.T @ g)

    elif av.ndim == 2 and bv.ndim == 1:
        if av.shape[1] != bv.shape[0]:
            raise ValueError(f"matmul: shape mismatch {av.shape} vs {bv.shape}")

        def bwd(g):
            _accum(a, np.outer(g, bv))
            _accum(b, av.T @ g)

    elif av.ndim == 1 and bv.ndim == 2:
        if av.shape[0] != bv.shape[0]:
            raise ValueError(f"matmul: shape mismatch {av.shape} vs {bv.shape}")

        def bwd(g):
            _accum(a, bv @ g)
            _accum(b, np.outer(av, g))

    else:
        raise ValueError(f"matmul: unsupported ranks {av.ndim} and {bv.ndim}")

    return _emit(av @ bv, (a, b), bwd)


def transpose(a: DiffArray) -> DiffArray:
    if a.ndim != 2:
        raise ValueError(f"transpose: expected rank 2, got shape {a.shape}")

    def bwd(g):
        _accum(a, g.T)

    return _emit(a.values.T, (a,), bwd)


def reshape(a: DiffArray, shape: tuple[int, ...]) -> DiffArray:
    old = a.shape

    def bwd(g):
        _accum(a, g.reshape(old))

    return _emit(a.values.reshape(shape), (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a: DiffArray) -> DiffArray:
    t = np.tanh(a.values)

    def bwd(g):
        _accum(a, g * (1.0 - t * t))

    return _emit(t, (a,), bwd)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: DiffArray) -> DiffArray:
    s = _sigmoid_values(np.asarray(a.values))

    def bwd(g):
        _accum(a, g * s * (1.0 - s))

    return _emit(s, (a,), bwd)


def leaky_relu(a: DiffArray, alpha: float) -> DiffArray:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu: alpha must lie in (0, 1), got {alpha}")
    av = a.values
    slope = np.where(av >= 0.0, 1.0, alpha)

    def bwd(g):
        _accum(a, g * slope)

    return _emit(av * slope, (a,), bwd)


def exp(a: DiffArray) -> DiffArray:
    out = np.exp(a.values)
    if not np.all(np.isfinite(out)):
        raise ValueError("exp: overflow to non-finite value")

    def bwd(g):
        _accum(a, g * out)

    return _emit(out, (a,), bwd)


def log(a: DiffArray) -> DiffArray:
    av = a.values
    if np.any(av <= 0.0):
        raise ValueError("log: domain violation (non-positive input)")

    def bwd(g):
        _accum(a, g / av)

    return _emit(np.log(av), (a,), bwd)


def logaddexp(a: DiffArray, b: DiffArray) -> DiffArray:
    """Stable log(exp(a) + exp(b)), elementwise."""
    _check_elementwise(a, b, "logaddexp")
    av, bv = a.values, b.values
    out = np.logaddexp(av, bv)

    def bwd(g):
        _accum(a, _fit(g * np.exp(av - out), av.shape))
        _accum(b, _fit(g * np.exp(bv - out), bv.shape))

    return _emit(out, (a, b), bwd)


def softmax(a: DiffArray, axis: int) -> DiffArray:
    av = a.values
    m = av.max(axis=axis, keepdims=True)
    e = np.exp(av - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        _accum(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _emit(s, (a,), bwd)


def log_softmax(a: DiffArray, axis: int) -> DiffArray:
    av = a.values
    m = av.max(axis=axis, keepdims=True)
    shifted = av - m
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(g):
        _accum(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _emit(out, (a,), bwd)


# ---------------------------------------------------------------------------
# structural ops


def concat(parts: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    if not parts:
        raise ValueError("concat: empty input list")
    parts = [_wrap(p) for p in parts]
    ndim = parts[0].ndim
    for p in parts:
        if p.ndim != ndim:
            raise ValueError(f"concat: rank mismatch {parts[0].shape} vs {p.shape}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _emit(np.concatenate([p.values for p in parts], axis=axis), parts, bwd)


def stack_rows(rows: Sequence[DiffArray]) -> DiffArray:
    """Stack 1-d arrays of equal length into a 2-d array, one per row."""
    if not rows:
        raise ValueError("stack_rows: empty input list")
    rows = [_wrap(r) for r in rows]
    width = rows[0].shape
    for r in rows:
        if r.ndim != 1 or r.shape != width:
            raise ValueError(f"stack_rows: shape mismatch {width} vs {r.shape}")

    def bwd(g):
        for i, r in enumerate(rows):
            _accum(r, g[i])

    return _emit(np.stack([r.values for r in rows], axis=0), rows, bwd)


def _getitem(a: DiffArray, key) -> DiffArray:
    """Basic indexing (ints and slices); gradient scatters back additively."""
    av = a.values
    out = av[key]

    def bwd(g):
        if not a.requires_grad:
            return
        ga = np.zeros_like(av)
        ga[key] += g
        _accum(a, ga)

    return _emit(out, (a,), bwd)


def take(a: DiffArray, indices, axis: int = 0) -> DiffArray:
    """Gather rows (axis 0) or columns (axis 1) by integer index, repeats allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    av = a.values
    if axis not in (0, 1) or axis >= av.ndim:
        raise ValueError(f"take: unsupported axis {axis} for shape {av.shape}")
    out = np.take(av, idx, axis=axis)

    def bwd(g):
        if not a.requires_grad:
            return
        ga = np.zeros_like(av)
        if axis == 0:
            np.add.at(ga, idx, g)
        else:
            np.add.at(ga, (slice(None), idx), g)
        _accum(a, ga)

    return _emit(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a: DiffArray, axis: int | None = None) -> DiffArray:
    av = a.values

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, av.shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), av.shape))

    return _emit(av.sum(axis=axis), (a,), bwd)


def reduce_mean(a: DiffArray, axis: int | None = None) -> DiffArray:
    av = a.values
    n = av.size if axis is None else av.shape[axis]
    if n == 0:
        raise ValueError("reduce_mean: empty reduction axis")

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / n, av.shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g / n, axis), av.shape))

    return _emit(av.mean(axis=axis), (a,), bwd)


def reduce_var(a: DiffArray, axis: int | None = None) -> DiffArray:
    """Population (divide-by-N) variance."""
    av = a.values
    n = av.size if axis is None else av.shape[axis]
    if n == 0:
        raise ValueError("reduce_var: empty reduction axis")
    mean = av.mean(axis=axis, keepdims=True)
    centered = av - mean

    def bwd(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        _accum(a, 2.0 * centered * gg / n)

    return _emit(av.var(axis=axis), (a,), bwd)


def masked_mean(a: DiffArray, mask, axis: int = 0) -> DiffArray:
    """Mean over axis 0 counting only mask-true positions."""
    if axis != 0:
        raise ValueError("masked_mean: only axis 0 is supported")
    m = np.asarray(mask, dtype=bool)
    av = a.values
    if m.shape != (av.shape[0],):
        raise ValueError(f"masked_mean: mask shape {m.shape} vs array {av.shape}")
    n = int(m.sum())
    if n == 0:
        raise ValueError("masked_mean: empty mask")

    def bwd(g):
        if not a.requires_grad:
            return
        ga = np.zeros_like(av)
        ga[m] = g / n
        _accum(a, ga)

    return _emit(av[m].mean(axis=0), (a,), bwd)


# ---------------------------------------------------------------------------
# explicit row-vector broadcasts


def add_rowvec(a: DiffArray, v: DiffArray) -> DiffArray:
    """Add a length-F vector to every row of an N x F matrix."""
    av, vv = a.values, v.values
    if av.ndim != 2 or vv.ndim != 1 or av.shape[1] != vv.shape[0]:
        raise ValueError(f"add_rowvec: shape mismatch {av.shape} vs {vv.shape}")

    def bwd(g):
        _accum(a, g)
        _accum(v, g.sum(axis=0))

    return _emit(av + vv[None, :], (a, v), bwd)


def mul_rowvec(a: DiffArray, v: DiffArray) -> DiffArray:
    """Multiply every row of an N x F matrix by a length-F vector."""
    av, vv = a.values, v.values
    if av.ndim != 2 or vv.ndim != 1 or av.shape[1] != vv.shape[0]:
        raise ValueError(f"mul_rowvec: shape mismatch {av.shape} vs {vv.shape}")

    def bwd(g):
        _accum(a, g * vv[None, :])
        _accum(v, (g * av).sum(axis=0))

    return _emit(av * vv[None, :], (a, v), bwd)
