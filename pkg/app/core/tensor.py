"""
tensor.py — minimal reverse-mode automatic differentiation over dense float64 tensors.

A Tape records every operation whose inputs include a tracked tensor. backward()
walks the recording once, newest first, and writes gradients into every tracked
tensor reachable from the loss. Leaves that the loss does not reach get zeros.

The op set is closed: matmul, add, mul, tanh, sigmoid, softplus, relu, softmax,
log, mean, sum, concat, reshape, l1_distance. Helpers such as sub() and
one_minus() compose those ops and record nothing else.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

# log() clamps its input here so BCE terms stay finite.
LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class Tensor:
    """Dense float64 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def constant(value) -> Tensor:
    """Untracked tensor; gradients never flow into it."""
    return Tensor(value, requires_grad=False)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def _expand_reduced(grad: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    """Broadcast the gradient of a reduction back to the input shape."""
    if axis is None:
        return np.broadcast_to(np.reshape(grad, ()), shape).copy()
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            grad = np.expand_dims(grad, a)
    return np.broadcast_to(grad, shape).copy()


@dataclass
class _Op:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records ops in creation order, so every op's inputs precede it.

    record=False gives a no-grad tape: ops compute values and record nothing,
    and outputs are untracked.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.ops: list[_Op] = []

    def __len__(self) -> int:
        return len(self.ops)

    def _emit(self, name: str, inputs: tuple[Tensor, ...], value: np.ndarray,
              backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
        tracked = self.record and any(t.requires_grad for t in inputs)
        out = Tensor(value, requires_grad=tracked, name=name)
        if tracked:
            self.ops.append(_Op(name, inputs, out, backward))
        return out

    # ------------------------------------------------------------------
    # Closed op set
    # ------------------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        value = a.data @ b.data
        return self._emit("matmul", (a, b), value,
                          lambda g: (g @ b.data.T, a.data.T @ g))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _broadcast_shape(a, b, "add")
        return self._emit("add", (a, b), a.data + b.data, lambda g: (g, g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        _broadcast_shape(a, b, "mul")
        return self._emit("mul", (a, b), a.data * b.data,
                          lambda g: (g * b.data, g * a.data))

    def tanh(self, a: Tensor) -> Tensor:
        value = np.tanh(a.data)
        return self._emit("tanh", (a,), value, lambda g: (g * (1.0 - value ** 2),))

    def sigmoid(self, a: Tensor) -> Tensor:
        value = expit(a.data)
        return self._emit("sigmoid", (a,), value, lambda g: (g * value * (1.0 - value),))

    def softplus(self, a: Tensor) -> Tensor:
        value = np.logaddexp(0.0, a.data)
        return self._emit("softplus", (a,), value, lambda g: (g * expit(a.data),))

    def relu(self, a: Tensor) -> Tensor:
        value = np.maximum(a.data, 0.0)
        return self._emit("relu", (a,), value, lambda g: (g * (a.data > 0.0),))

    def softmax(self, a: Tensor, axis: int = -1) -> Tensor:
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        value = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            return (value * (g - (g * value).sum(axis=axis, keepdims=True)),)

        return self._emit("softmax", (a,), value, backward)

    def log(self, a: Tensor) -> Tensor:
        clamped = np.maximum(a.data, LOG_FLOOR)
        live = a.data > LOG_FLOOR
        return self._emit("log", (a,), np.log(clamped),
                          lambda g: (np.where(live, g / clamped, 0.0),))

    def mean(self, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
        value = a.data.mean(axis=axis, keepdims=keepdims)
        count = a.data.size / max(np.size(value), 1)
        return self._emit("mean", (a,), value,
                          lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))

    def sum(self, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
        value = a.data.sum(axis=axis, keepdims=keepdims)
        return self._emit("sum", (a,), value,
                          lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))

    def concat(self, tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
        if not tensors:
            raise ShapeError("concat: no tensors given")
        try:
            value = np.concatenate([t.data for t in tensors], axis=axis)
        except ValueError as exc:
            shapes = " and ".join(str(t.shape) for t in tensors)
            raise ShapeError(f"concat: shapes {shapes} do not conform on axis {axis}") from exc
        cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
        return self._emit("concat", tuple(tensors), value,
                          lambda g: tuple(np.split(g, cuts, axis=axis)))

    def reshape(self, a: Tensor, shape: tuple[int, ...]) -> Tensor:
        try:
            value = a.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
        return self._emit("reshape", (a,), value, lambda g: (g.reshape(a.shape),))

    def l1_distance(self, a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
        """Sum of |a - b| over `axis`."""
        if a.shape != b.shape:
            raise ShapeError(f"l1_distance: shapes {a.shape} and {b.shape} differ")
        diff = a.data - b.data
        sign = np.sign(diff)

        def backward(g):
            expanded = np.expand_dims(g, axis) * sign
            return expanded, -expanded

        return self._emit("l1_distance", (a, b), np.abs(diff).sum(axis=axis), backward)

    # ------------------------------------------------------------------
    # Composites (built from the closed set)
    # ------------------------------------------------------------------

    def scale(self, a: Tensor, factor: float) -> Tensor:
        return self.mul(a, constant(factor))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self.add(a, self.scale(b, -1.0))

    def one_minus(self, a: Tensor) -> Tensor:
        return self.add(constant(1.0), self.scale(a, -1.0))

    def normalize_rows(self, a: Tensor) -> Tensor:
        """Divide each row of a nonnegative matrix by its sum, as softmax(log(a)).

        All-zero rows come out uniform because every entry hits LOG_FLOOR.
        """
        return self.softmax(self.log(a), axis=-1)

    # ------------------------------------------------------------------
    # Reverse pass
    # ------------------------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every tracked tensor recorded on this tape."""
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if not self.record:
            raise RuntimeError("backward: tape was created with record=False")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(op.output) for op in self.ops}
        leaves: dict[int, Tensor] = {}

        for op in reversed(self.ops):
            g = grads.pop(id(op.output), None)
            if g is None:
                op.output.grad = np.zeros_like(op.output.data)
                continue
            op.output.grad = g
            for tensor, tg in zip(op.inputs, op.backward(g)):
                if tg is None or not tensor.requires_grad:
                    continue
                tg = _unbroadcast(np.asarray(tg, dtype=np.float64), tensor.shape)
                key = id(tensor)
                grads[key] = grads[key] + tg if key in grads else tg
                if key not in produced:
                    leaves[key] = tensor

        for op in self.ops:
            for tensor in op.inputs:
                if tensor.requires_grad and id(tensor) not in produced:
                    leaves.setdefault(id(tensor), tensor)
        for key, tensor in leaves.items():
            tensor.grad = grads.get(key, np.zeros_like(tensor.data))


def numeric_gradient(fn: Callable[[], float], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of fn() with respect to every entry of tensor."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn()
        flat[i] = orig - h
        minus = fn()
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
