"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Every tensor is a 64-bit, two-dimensional array.  Operations executed while a
:class:`Tape` is active (``with Tape() as tape: ...``) are recorded when at
least one input requires a gradient; ``tape.backward(loss)`` then replays the
record in reverse and fills ``.grad`` on every reachable tensor.

Batches are laid out row-wise: a single example of width ``d`` is a ``1 x d``
row, a batch of ``B`` examples is ``B x d``.  Weight matrices keep the
``out x in`` orientation and are applied as ``x @ W.T``.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from ._kernels import all_finite

DTYPE = np.float64
DEFAULT_LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of a compute tape (already consumed, non-scalar loss, ...)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got array with shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}({self.rows}x{self.cols}, requires_grad={self.requires_grad})"

    # Operator sugar; the named functions below are the real API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def zeros(rows: int, cols: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros((rows, cols)), requires_grad=requires_grad)


class _Record:
    __slots__ = ("op", "outputs", "inputs", "backward", "checked")

    def __init__(self, op, outputs, inputs, backward, checked=False):
        self.op = op
        self.outputs = outputs
        self.inputs = inputs
        self.backward = backward
        self.checked = checked


_active = threading.local()


def _tape_stack() -> list:
    stack = getattr(_active, "stack", None)
    if stack is None:
        stack = _active.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations, replayed once by :meth:`backward`."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False
        self.visited: list[int] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    def record(self, op: str, outputs: Sequence[Tensor], inputs: Sequence[Tensor],
               backward: Callable, checked: bool = False) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.records.append(_Record(op, tuple(outputs), tuple(inputs), backward, checked))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every tensor reachable backwards from ``loss``.

        Gradients of leaves touched by this tape are reset first, so repeated
        training steps never accumulate stale values.
        """
        if self.consumed:
            raise TapeError("tape already consumed; record a new forward pass")
        if loss.shape != (1, 1):
            raise TapeError(f"loss must be a 1x1 scalar, got {loss.shape}")
        self.consumed = True
        for rec in self.records:
            for t in rec.inputs:
                t.grad = None
            for t in rec.outputs:
                t.grad = None

        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1), dtype=DTYPE)}
        for idx in range(len(self.records) - 1, -1, -1):
            rec = self.records[idx]
            out_grads = [grads.get(id(o)) for o in rec.outputs]
            if all(g is None for g in out_grads):
                continue
            self.visited.append(idx)
            for o, g in zip(rec.outputs, out_grads):
                if g is not None:
                    o.grad = g
            if len(rec.outputs) == 1:
                in_grads = rec.backward(out_grads[0])
            else:
                in_grads = rec.backward(out_grads)
            for inp, g in zip(rec.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if not rec.checked:
                    _check_finite(g, f"{rec.op} (backward)")
                key = id(inp)
                prev = grads.get(key)
                grads[key] = g if prev is None else prev + g
                inp.grad = grads[key]
        if loss.grad is None:
            loss.grad = grads[id(loss)]


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not all_finite(arr):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(op: str, outputs: Sequence[np.ndarray], inputs: Sequence[Tensor],
              backward: Callable, checked: bool = False) -> tuple[Tensor, ...]:
    """Wrap precomputed output arrays as tensors and record ``backward`` for them.

    ``backward`` receives the upstream gradient (a list of gradients, with
    ``None`` for unreached outputs, when there are several outputs) and returns
    one gradient or ``None`` per input.  ``checked=True`` declares that the
    op itself guarantees finite outputs and raises on non-finite gradients,
    so the generic checks are skipped.
    """
    needs = any(t.requires_grad for t in inputs)
    outs = []
    for arr in outputs:
        if not checked:
            _check_finite(arr, op)
        outs.append(Tensor(arr, requires_grad=needs))
    tape = active_tape()
    if needs and tape is not None:
        tape.record(op, outs, inputs, backward, checked)
    return tuple(outs)


def _unary(op: str, out: np.ndarray, a: Tensor, backward) -> Tensor:
    return custom_op(op, (out,), (a,), backward)[0]


def _binary(op: str, out: np.ndarray, a: Tensor, b: Tensor, backward) -> Tensor:
    return custom_op(op, (out,), (a, b), backward)[0]


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Linear algebra and structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    # np.dot rather than @: numpy's matmul skips BLAS for some thin shapes
    return _binary("matmul", np.dot(ad, bd), a, b,
                   lambda g: (np.dot(g, bd.T), np.dot(ad.T, g)))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x W^T + b^T`` for weights ``out x in`` and bias ``out x 1``.

    Equivalent to ``add_bias(matmul(x, transpose(w)), b)`` recorded as one op.
    """
    if x.cols != w.cols:
        raise ShapeError(f"linear: input {x.shape} does not fit weights {w.shape}")
    if b.shape != (w.rows, 1):
        raise ShapeError(f"linear: bias {b.shape} does not fit weights {w.shape}")
    xd, wd = x.data, w.data
    out = np.dot(xd, wd.T)
    out += b.data.T
    return custom_op("linear", (out,), (x, w, b),
                     lambda g: (np.dot(g, wd), np.dot(g.T, xd), g.sum(axis=0).reshape(-1, 1)))[0]


def transpose(a: Tensor) -> Tensor:
    return _unary("transpose", a.data.T, a, lambda g: (g.T,))


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {(rows, cols)}")
    shape = a.shape
    return _unary("reshape", a.data.reshape(rows, cols), a, lambda g: (g.reshape(shape),))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise ShapeError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    p = a.cols
    return _binary("concat_cols", np.concatenate((a.data, b.data), axis=1), a, b,
                   lambda g: (g[:, :p], g[:, p:]))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows: nothing to concatenate")
    cols = parts[0].cols
    if any(p.cols != cols for p in parts):
        raise ShapeError("concat_rows: column counts differ")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def bwd(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return custom_op("concat_rows", (np.concatenate([p.data for p in parts], axis=0),),
                     tuple(parts), bwd)[0]


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.rows:
        raise ShapeError(f"slice_rows: [{start}, {stop}) outside {a.rows} rows")
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[start:stop] = g
        return (full,)

    return _unary("slice_rows", a.data[start:stop], a, bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.cols:
        raise ShapeError(f"slice_cols: [{start}, {stop}) outside {a.cols} cols")
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[:, start:stop] = g
        return (full,)

    return _unary("slice_cols", a.data[:, start:stop], a, bwd)


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Stack ``reps`` copies of ``a`` vertically."""
    rows, cols = a.shape
    return _unary("tile_rows", np.tile(a.data, (reps, 1)), a,
                  lambda g: (g.reshape(reps, rows, cols).sum(axis=0),))


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a column-vector bias (``n x 1``) to every row of ``a`` (``B x n``)."""
    if b.shape != (a.cols, 1):
        raise ShapeError(f"add_bias: bias {b.shape} does not fit {a.shape}")
    return _binary("add_bias", a.data + b.data.T, a, b,
                   lambda g: (g, g.sum(axis=0).reshape(-1, 1)))


def mul_col(a: Tensor, w: Tensor) -> Tensor:
    """Scale each row of ``a`` by the matching entry of the column ``w``."""
    if w.shape != (a.rows, 1):
        raise ShapeError(f"mul_col: weights {w.shape} do not fit {a.shape}")
    ad, wd = a.data, w.data
    return _binary("mul_col", ad * wd, a, w,
                   lambda g: (g * wd, (g * ad).sum(axis=1, keepdims=True)))


def sum_rows(a: Tensor) -> Tensor:
    """Column sums as a ``1 x cols`` row."""
    rows = a.rows
    return _unary("sum_rows", a.data.sum(axis=0, keepdims=True), a,
                  lambda g: (np.repeat(g, rows, axis=0),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _unary("sum_all", np.array([[a.data.sum()]]), a,
                  lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _unary("mean_all", np.array([[a.data.mean()]]), a,
                  lambda g: (np.full(shape, g[0, 0] / n),))


def scale(a: Tensor, c: float) -> Tensor:
    return _unary("scale", a.data * c, a, lambda g: (g * c,))


# ---------------------------------------------------------------------------
# Element-wise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _binary("add", a.data + b.data, a, b, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _binary("sub", a.data - b.data, a, b, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _binary("mul", ad * bd, a, b, lambda g: (g * bd, g * ad))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _unary("square", ad * ad, a, lambda g: (2.0 * ad * g,))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _unary("tanh", t, a, lambda g: (g * (1.0 - t * t),))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _unary("sigmoid", s, a, lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _unary("relu", np.where(mask, a.data, 0.0), a, lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    mask = a.data > 0
    local = np.where(mask, 1.0, slope)
    return _unary("leaky_relu", a.data * local, a, lambda g: (g * local,))


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(a: Tensor, kind: str, b: Tensor | None = None,
                slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    """Dispatch by name: add, sub, mul, tanh, sigmoid, relu, leaky_relu."""
    if kind in _BINARY:
        if b is None:
            raise ShapeError(f"{kind} needs a second operand")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    raise ValueError(f"unknown element-wise kind {kind!r}")


def softmax_row(v: Tensor) -> Tensor:
    """Softmax along each row (max-shifted for stability)."""
    if v.cols == 0 or v.rows == 0:
        raise ShapeError("softmax_row: empty input")
    z = v.data - v.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        # (diag(p) - p p^T) g, row by row
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _unary("softmax_row", p, v, bwd)
