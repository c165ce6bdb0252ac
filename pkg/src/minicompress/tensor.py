"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array plus an optional gradient
buffer.  Differentiable operations record themselves onto the innermost
active :class:`Tape`; ``Tape.backward(loss)`` then walks the records in
reverse execution order and assigns ``.grad`` on every parameter leaf that
took part in the computation (zeros for leaves the loss does not reach).

Outside any ``with Tape():`` block the same operations run without
recording, so inference passes keep no references to intermediate values.

Double precision is the reference mode: every gradient is checked against
central finite differences in float64.  Single precision is supported for
speed and follows the same code paths.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, NumericsError

Scalar = Union[int, float]


class Tensor:
    """N-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """View of the same buffer that is cut off from autodiff."""
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        if self.grad is not None:
            t.grad = self.grad.copy()
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def assert_finite(self, what: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            raise NumericsError(f"non-finite values in {what}")

    # operator sugar -----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# Tape ---------------------------------------------------------------------


class TapeRecord:
    """One executed primitive: its output, inputs, and backward rule.

    ``backward_fn`` maps the gradient w.r.t. the output to a tuple of
    gradients w.r.t. each input (``None`` for inputs that need none).
    """

    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor],
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.output = output
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


_TAPE_STACK: list = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed primitives, in topological order.

    Replayable: because ``backward`` rebuilds the gradient accumulator from
    scratch and assigns (never adds) into ``leaf.grad``, running it twice
    from the same forward yields identical gradients.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every reachable leaf with d(loss)/d(leaf).

        Leaves that appear on the tape before the loss but do not influence
        it receive explicit zero gradients.
        """
        if loss.size != 1:
            raise DimensionError(
                f"backward requires a scalar loss, got shape {loss.shape}")
        loss_idx = None
        for i in range(len(self.records) - 1, -1, -1):
            if self.records[i].output is loss:
                loss_idx = i
                break
        if loss_idx is None:
            raise DimensionError("loss was not produced by this tape")

        segment = self.records[: loss_idx + 1]
        produced = {id(rec.output) for rec in segment}
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for rec in reversed(segment):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward_fn(g)
            for t, ig in zip(rec.inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                # Functional accumulation: backward rules may hand the same
                # array to several inputs, so stored buffers are never
                # mutated in place.
                grads[id(t)] = ig if prev is None else prev + ig
        # Assign results on leaves: every requires_grad input of the segment
        # that is not itself produced by the tape.
        seen: set[int] = set()
        for rec in segment:
            for t in rec.inputs:
                if not t.requires_grad or id(t) in produced or id(t) in seen:
                    continue
                seen.add(id(t))
                g = grads.get(id(t))
                t.grad = g if g is not None else np.zeros_like(t.data)


def record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Attach ``out`` to the active tape when any input is tracked."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(TapeRecord(out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# elementwise primitives ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return record(out, (a, b), bwd)


def tabs(a) -> Tensor:
    """Elementwise absolute value; subgradient at 0 is 0."""
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))

    def bwd(g):
        return (g * np.sign(a.data),)

    return record(out, (a,), bwd)


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))

    def bwd(g):
        return (g / (2.0 * out.data),)

    return record(out, (a,), bwd)


def relu(a) -> Tensor:
    """max(x, 0); the gradient at exactly 0 is defined as 0."""
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def bwd(g):
        return (g * (a.data > 0.0),)

    return record(out, (a,), bwd)


# reductions and shape ops ---------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return record(out, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return record(out, (a,), bwd)


def matmul(a, b) -> Tensor:
    """2-D matrix product (the only rank this toolkit needs)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return record(out, (a, b), bwd)


def log_softmax(a, axis: int = 1) -> Tensor:
    """Numerically stable log-softmax along ``axis``."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(z - lse)

    def bwd(g):
        softmax = np.exp(out.data)
        return (g - softmax * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), bwd)
