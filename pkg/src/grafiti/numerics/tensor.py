"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps an immutable numpy array.  Operations on tensors are
recorded on the innermost active :class:`Tape` whenever at least one input
participates in differentiation; :meth:`Tape.gradient` then replays the record
backwards.  Outside a tape every op is a plain numpy computation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64

_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateAttentionError(ValueError):
    """A softmax row has no admissible entry (an isolated graph node)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE).view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tensors created inside with ``requires_grad``
    inputs are recorded until the block exits.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self._entries.append((out, inputs, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Gradients of ``target`` with respect to each source.

        ``seed`` defaults to ones, so a non-scalar target is differentiated
        through the sum of its entries.  Sources the target does not depend
        on get zero gradients.
        """
        grads: dict[int, np.ndarray] = {}
        if target.requires_grad:
            grads[id(target)] = (
                np.ones_like(target.data) if seed is None else np.asarray(seed, dtype=DTYPE)
            )
        for out, inputs, backward in reversed(self._entries):
            g = grads.get(id(out))
            if g is None:
                continue
            in_grads = backward(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs: tuple, backward: Callable) -> Tensor:
    tape = _tape()
    needs = tape is not None and any(isinstance(i, Tensor) and i.requires_grad for i in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sin(a: Tensor) -> Tensor:
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(data, tensors, backward)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor) -> Tensor:
    return mul(sum(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# Indexing and segment (scatter) operations
# ---------------------------------------------------------------------------


class Segments:
    """Assignment of ``m`` rows to ``n`` segments, with cached scatter matrix.

    Segment ids need not be sorted; empty segments are allowed.
    """

    def __init__(self, ids: np.ndarray, count: int):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.count = int(count)
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.count):
            raise IndexError(f"segment ids must lie in [0, {self.count})")
        self._matrix = None

    def __len__(self) -> int:
        return self.ids.size

    @property
    def matrix(self) -> sp.csr_matrix:
        if self._matrix is None:
            m = self.ids.size
            self._matrix = sp.csr_matrix(
                (np.ones(m, dtype=DTYPE), (self.ids, np.arange(m))), shape=(self.count, m)
            )
        return self._matrix

    def sizes(self) -> np.ndarray:
        return np.bincount(self.ids, minlength=self.count)

    def reduce(self, x: np.ndarray) -> np.ndarray:
        flat = x.reshape(x.shape[0], -1)
        out = self.matrix @ flat
        return np.asarray(out).reshape((self.count,) + x.shape[1:])


def gather(a: Tensor, index: np.ndarray | Segments) -> Tensor:
    """Rows ``a[index]``; the backward pass scatter-adds into ``a``."""
    seg = index if isinstance(index, Segments) else Segments(index, a.shape[0])
    if seg.count != a.shape[0]:
        raise ShapeError(f"gather: index built for {seg.count} rows, tensor has {a.shape[0]}")
    return _result(a.data[seg.ids], (a,), lambda g: (seg.reduce(g),))


def segment_sum(a: Tensor, segments: Segments) -> Tensor:
    if a.shape[0] != len(segments):
        raise ShapeError(f"segment_sum: {a.shape[0]} rows vs {len(segments)} segment ids")
    return _result(segments.reduce(a.data), (a,), lambda g: (g[segments.ids],))


def segment_softmax(scores: Tensor, segments: Segments) -> Tensor:
    """Softmax over the rows sharing a segment id, independently per column."""
    ids = segments.ids
    if scores.shape[0] != ids.size:
        raise ShapeError(f"segment_softmax: {scores.shape[0]} rows vs {ids.size} segment ids")
    s = scores.data
    top = np.full((segments.count,) + s.shape[1:], -np.inf)
    np.maximum.at(top, ids, s)
    e = np.exp(s - top[ids])
    p = e / segments.reduce(e)[ids]

    def backward(g):
        pg = p * g
        return (pg - p * segments.reduce(pg)[ids],)

    return _result(p, (scores,), backward)


def masked_softmax(scores, mask) -> Tensor:
    """Softmax along the last axis restricted to ``mask``; masked entries are 0."""
    scores = as_tensor(scores)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=-1).all():
        raise DegenerateAttentionError("masked_softmax: a row has no unmasked entry")
    s = np.where(mask, scores.data, -np.inf)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        pg = p * g
        return (pg - p * pg.sum(axis=-1, keepdims=True),)

    return _result(p, (scores,), backward)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


def parameters(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap raw arrays as differentiable leaves, keyed by name."""
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        hi = f(x)
        x[i] = orig - step
        lo = f(x)
        x[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|, |b|, floor).

    The floor turns the check absolute for gradients that vanish identically
    (e.g. a key bias under softmax shift invariance), where both sides are
    pure roundoff.
    """
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def all_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
