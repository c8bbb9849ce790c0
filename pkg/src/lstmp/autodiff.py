"""Define-by-run reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied through it.  Leaf tensors
(parameters, constants) live outside any tape; tensors produced by tape
methods carry the id of their producing record.  ``backward`` walks the
records in reverse and accumulates gradients into ``Tensor.grad``.

Arrays are row-major numpy arrays.  Most ops accept a single vector or a
batch of row vectors (shape ``(B, n)``); the batch axis is what lets the
captioner train on mini-batches without a Python loop per sample.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-300

_ids = itertools.count()


class Tensor:
    """A float64 array with a same-shape gradient accumulator."""

    __slots__ = ("values", "_grad", "requires_grad", "tape_id", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.values = arr
        self._grad = np.zeros_like(arr)
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def grad(self) -> np.ndarray:
        # tape intermediates allocate their buffer on first touch
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


class _Record:
    __slots__ = ("inputs", "output", "rule")

    def __init__(self, inputs, output, rule):
        self.inputs = inputs
        self.output = output
        self.rule = rule


BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Ordered record of operations for one forward pass.

    With ``record=False`` the tape only computes values; this is how
    inference runs without paying for backward closures.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.records: list[_Record] = []
        self._id = next(_ids)

    def __len__(self) -> int:
        return len(self.records)

    # -- bookkeeping -------------------------------------------------------

    def _wrap(self, x) -> Tensor:
        return x if isinstance(x, Tensor) else constant(x)

    def _emit(self, values: np.ndarray, inputs: tuple[Tensor, ...], rule: BackwardRule) -> Tensor:
        # grad of a tape-produced tensor stays None until backward reaches it
        out = Tensor.__new__(Tensor)
        out.values = values
        out._grad = None
        out.name = None
        out.tape_id = None
        out.requires_grad = False
        if self.record:
            for t in inputs:
                if t.requires_grad:
                    out.requires_grad = True
                    out.tape_id = len(self.records)
                    self.records.append(_Record(inputs, out, rule))
                    break
        return out

    # -- primitives --------------------------------------------------------

    def add(self, a, b) -> Tensor:
        a, b = self._wrap(a), self._wrap(b)
        sa, sb = a.shape, b.shape
        return self._emit(
            a.values + b.values, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    def sub(self, a, b) -> Tensor:
        a, b = self._wrap(a), self._wrap(b)
        sa, sb = a.shape, b.shape
        return self._emit(
            a.values - b.values, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        )

    def mul(self, a, b) -> Tensor:
        a, b = self._wrap(a), self._wrap(b)
        av, bv = a.values, b.values
        return self._emit(
            av * bv, (a, b),
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        )

    def scale(self, a, c: float) -> Tensor:
        a = self._wrap(a)
        c = float(c)
        return self._emit(a.values * c, (a,), lambda g: (g * c,))

    def matvec(self, w, x) -> Tensor:
        """``w @ x`` for a vector ``x``, or row-wise for a batch ``(B, n)``.

        A 1-D ``w`` is treated as a single-row matrix, so the output keeps
        a trailing axis of length 1.
        """
        w, x = self._wrap(w), self._wrap(x)
        wv = w.values.reshape(1, -1) if w.values.ndim == 1 else w.values
        xv = x.values
        if xv.shape[-1] != wv.shape[1]:
            raise ValueError(f"matvec shape mismatch: {w.shape} @ {x.shape}")
        wshape = w.shape

        def rule(g):
            if xv.ndim == 1:
                gw = np.outer(g, xv)
            else:
                gw = g.T @ xv
            return gw.reshape(wshape), g @ wv

        return self._emit(xv @ wv.T, (w, x), rule)

    def matmul(self, a, b) -> Tensor:
        a, b = self._wrap(a), self._wrap(b)
        av, bv = a.values, b.values
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        return self._emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))

    def sigmoid(self, x) -> Tensor:
        x = self._wrap(x)
        # exp only ever sees non-positive arguments
        xv = x.values
        e = np.exp(-np.abs(xv))
        s = np.where(xv >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return self._emit(s, (x,), lambda g: (g * s * (1.0 - s),))

    def tanh(self, x) -> Tensor:
        x = self._wrap(x)
        t = np.tanh(x.values)
        return self._emit(t, (x,), lambda g: (g * (1.0 - t * t),))

    def softmax(self, x) -> Tensor:
        """Softmax over the last axis."""
        x = self._wrap(x)
        z = x.values - x.values.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)

        def rule(g):
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

        return self._emit(p, (x,), rule)

    def log(self, x) -> Tensor:
        x = self._wrap(x)
        xv = x.values
        # NaN must survive the floor so callers can detect a diverged loss
        live = ~(xv <= LOG_FLOOR)
        out = np.log(np.maximum(xv, LOG_FLOOR))
        safe = np.where(live, xv, 1.0)
        return self._emit(out, (x,), lambda g: (np.where(live, g / safe, 0.0),))

    def sum(self, x, axis: int | None = None) -> Tensor:
        x = self._wrap(x)
        shape = x.shape
        if axis is None:
            return self._emit(
                np.array([x.values.sum()]), (x,),
                lambda g: (np.full(shape, g[0]),),
            )
        out = x.values.sum(axis=axis, keepdims=True)
        return self._emit(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def gather(self, table, index) -> Tensor:
        """Row lookup ``table[index]`` (embedding lookup)."""
        table = self._wrap(table)
        idx = np.asarray(index, dtype=np.int64)
        n = table.shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"row index out of range for table with {n} rows")
        tshape = table.shape

        def rule(g):
            gt = np.zeros(tshape)
            np.add.at(gt, idx, g)
            return (gt,)

        return self._emit(table.values[idx], (table,), rule)

    def concat(self, parts: Sequence, axis: int = -1) -> Tensor:
        parts = tuple(self._wrap(p) for p in parts)
        sizes = [p.shape[axis] for p in parts]
        cuts = np.cumsum(sizes)[:-1]

        def rule(g):
            return tuple(np.split(g, cuts, axis=axis))

        return self._emit(np.concatenate([p.values for p in parts], axis=axis), parts, rule)

    # -- backward ------------------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``grad`` of every tensor on ``tape``.

    Gradients are added to whatever is already in ``grad``; callers zero
    parameter gradients between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.tape_id is None or loss.tape_id >= len(tape.records) or tape.records[loss.tape_id].output is not loss:
        raise ValueError("loss was not produced on this tape")
    loss._grad = np.ones_like(loss.values) if loss._grad is None else loss._grad + 1.0
    for rec in reversed(tape.records[: loss.tape_id + 1]):
        g_out = rec.output._grad
        if g_out is None:
            continue
        grads = rec.rule(g_out)
        for t, g in zip(rec.inputs, grads):
            if not t.requires_grad or g is None:
                continue
            if t.tape_id is None:
                t.grad += g  # leaf: owns its buffer
            elif t._grad is None:
                t._grad = g
            else:
                t._grad = t._grad + g  # g may alias another input's gradient


def finite_diff_check(f: Callable[[], float], params: Sequence[Tensor], h: float = 1e-5,
                      analytic: Sequence[np.ndarray] | None = None) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` re-evaluates the scalar objective from the current parameter
    values.  ``analytic`` defaults to each parameter's ``grad``.  The error
    per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if analytic is None:
        analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.values.reshape(-1)
        a = np.asarray(a).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"objective not finite while perturbing {p.name or 'tensor'}[{i}]")
            num = (fp - fm) / (2.0 * h)
            err = abs(a[i] - num) / max(abs(a[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
