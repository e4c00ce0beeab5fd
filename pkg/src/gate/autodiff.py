"""Dense reverse-mode differentiation over rank <= 2 float64 arrays.

Operations append records to the active :class:`Tape`; :func:`backward`
walks the records in reverse and accumulates gradients.  Leaves created
with ``requires_grad=True`` (model parameters) keep their gradients after
the pass; intermediate gradients live only for the duration of the call.
"""
from __future__ import annotations

import threading
import weakref
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its preconditions."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Value:
    """A dense float64 array that may participate in a tape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"rank {arr.ndim} arrays are not supported")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, Value):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    recorded when at least one operand requires a gradient.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.records)

    def _record(self, inputs: Sequence[Value], out: Value, backward) -> None:
        out.node_id = len(self.records)
        self.records.append(_Record(tuple(inputs), out, backward))


class no_grad:
    """Context manager that suspends recording."""

    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = None

    def __exit__(self, *exc):
        _state.tape = self._prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _make(data: np.ndarray, inputs: Sequence[Value], backward: BackwardFn) -> Value:
    tape = _active_tape()
    track = tape is not None and any(v.requires_grad for v in inputs)
    out = Value(data, requires_grad=track)
    if track:
        tape._record(inputs, out, backward)
    return out


def backward(tape: Tape, loss: Value) -> None:
    """Populate ``.grad`` of every tracked leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; reset them with ``zero_grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    start = loss.node_id if loss.node_id is not None else -1
    for rec in reversed(tape.records[: start + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node_id is None:
                # leaf
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    if loss.node_id is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


# ---------------------------------------------------------------- operations


def matmul(a: Value, b: Value) -> Value:
    if a.data.ndim == 0 or b.data.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ bd.T if bd.ndim == 2 else np.multiply.outer(g, bd)
        if b.requires_grad:
            gb = ad.T @ g if ad.ndim == 2 else np.multiply.outer(ad, g)
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def add(a: Value, b: Value) -> Value:
    """Elementwise sum; a 1-D ``b`` broadcasts over the rows of a 2-D ``a``."""
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        return _make(ad + bd, (a, b), lambda g: (g, g))
    if ad.ndim == 2 and bd.ndim == 1 and ad.shape[1] == bd.shape[0]:
        return _make(ad + bd, (a, b), lambda g: (g, g.sum(axis=0)))
    if bd.size == 1 and bd.ndim <= 1:
        return _make(ad + bd, (a, b), lambda g: (g, np.full(bd.shape, g.sum())))
    raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Value, b: Value) -> Value:
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        return _make(ad - bd, (a, b), lambda g: (g, -g))
    if bd.size == 1 and bd.ndim <= 1:
        return _make(ad - bd, (a, b), lambda g: (g, np.full(bd.shape, -g.sum())))
    raise DimensionError(f"sub shape mismatch: {a.shape} - {b.shape}")


def mul(a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Value, c: float) -> Value:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Value) -> Value:
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def add_relu(a: Value, b: Value) -> Value:
    """``relu(a + b)`` for same-shape operands in one pass."""
    if a.shape != b.shape:
        raise DimensionError(f"add_relu shape mismatch: {a.shape} + {b.shape}")
    out = np.add(a.data, b.data)
    np.maximum(out, 0.0, out=out)

    def bw(g):
        gm = g * (out > 0)
        return gm, gm

    return _make(out, (a, b), bw)


def concat(a: Value, b: Value) -> Value:
    """Concatenate along the last axis."""
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim or ad.shape[:-1] != bd.shape[:-1]:
        raise DimensionError(f"concat shape mismatch: {a.shape} | {b.shape}")
    k = ad.shape[-1]
    return _make(np.concatenate([ad, bd], axis=-1), (a, b), lambda g: (g[..., :k], g[..., k:]))


def reduce_sum_rows(a: Value) -> Value:
    """Column sums of a matrix: ``[m, n] -> [n]``."""
    if a.data.ndim != 2:
        raise DimensionError(f"reduce_sum_rows needs a matrix, got {a.shape}")
    m = a.shape[0]
    return _make(a.data.sum(axis=0), (a,), lambda g: (np.broadcast_to(g, (m, g.shape[0])).copy(),))


def total(a: Value) -> Value:
    """Sum of every element, as a shape-``()`` scalar."""
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Value) -> Value:
    n = a.size
    return scale(total(a), 1.0 / n)


def mse(a: Value, b: Value) -> Value:
    """``(1/N) sum (a_i - b_i)^2`` over all elements."""
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    return _make(np.asarray((diff * diff).sum() / n), (a, b),
                 lambda g: (2.0 * float(g) / n * diff, -2.0 * float(g) / n * diff))


def row_norms(a: Value) -> Value:
    """Euclidean norm of each row, ``[m, n] -> [m]``.  Zero rows get zero gradient."""
    if a.data.ndim != 2:
        raise DimensionError(f"row_norms needs a matrix, got {a.shape}")
    norms = np.sqrt((a.data * a.data).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)

    def bw(g):
        return ((g / safe)[:, None] * a.data * (norms > 0)[:, None],)

    return _make(norms, (a,), bw)


def spmm(m: sp.spmatrix, a: Value) -> Value:
    """Constant sparse matrix times a Value (gather, scatter and pooling)."""
    if m.shape[1] != a.shape[0]:
        raise DimensionError(f"spmm shape mismatch: {m.shape} @ {a.shape}")
    def bw(g):
        return (np.asarray(_transposed(m) @ g),)

    return _make(np.asarray(m @ a.data), (a,), bw)


_TRANSPOSES: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _transposed(m: sp.spmatrix) -> sp.spmatrix:
    """CSR transpose of a constant operator, cached per operator."""
    try:
        return _TRANSPOSES[m]
    except (KeyError, TypeError):
        pass
    t = m.T.tocsr()
    try:
        _TRANSPOSES[m] = t
    except TypeError:
        pass
    return t


def rows(a: Value, start: int, stop: int) -> Value:
    """Row slice ``a[start:stop]``."""
    n = a.shape[0]

    def bw(g):
        full = np.zeros((n,) + a.shape[1:])
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop], (a,), bw)


def tile_rows(a: Value, copies: int) -> Value:
    """Stack ``copies`` replicas of a matrix vertically."""
    m, n = a.shape
    return _make(np.tile(a.data, (copies, 1)), (a,), lambda g: (g.reshape(copies, m, n).sum(axis=0),))


def vstack(parts: Sequence[Value]) -> Value:
    sizes = [p.shape[0] for p in parts]
    offs = np.cumsum([0] + sizes)
    data = np.concatenate([p.data for p in parts], axis=0)
    return _make(data, tuple(parts), lambda g: tuple(g[offs[i]:offs[i + 1]] for i in range(len(parts))))


def reshape(a: Value, shape: tuple[int, ...]) -> Value:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {shape}") from None
    return _make(data, (a,), lambda g: (g.reshape(old),))


def dropout(a: Value, rate: float, rng: np.random.Generator | None, training: bool) -> Value:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))
