"""Reverse-mode autodiff over numpy arrays.

Each op records its parents and a closure mapping the upstream gradient to
one gradient per parent.  ``Value.backward`` walks the graph in reverse
topological order.  Graph recording is skipped entirely inside ``no_grad``.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from latent_rhe.errors import ShapeError

_state = threading.local()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class Value:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Value, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Value{label}(shape={self.shape}, dtype={self.dtype})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        for node in order:
            if node is not self and node._backward is not None:
                node.grad = None
        self.grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    raise ShapeError(f"gradient shape {g.shape} does not match {parent.shape}")
                parent.grad = g if parent.grad is None else parent.grad + g
        for node in order:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _result(data: np.ndarray, parents: Sequence[Value], backward) -> Value:
    out = Value(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _const(x, like: Value) -> Value:
    """Wrap a non-Value operand, matching the dtype of the Value it meets."""
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=like.dtype))


def _pair(a, b) -> tuple[Value, Value]:
    if isinstance(a, Value):
        return a, _const(b, a)
    return _const(a, b), b


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Value, b: Value, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Value:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Value:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def neg(a: Value) -> Value:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Value:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Value:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)),
    )


def matmul(a: Value, b: Value) -> Value:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def square(a: Value) -> Value:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(a: Value) -> Value:
    out = np.maximum(a.data, 0)
    return _result(out, (a,), lambda g: (g * (out > 0),))


def sigmoid(a: Value) -> Value:
    out = 0.5 + 0.5 * np.tanh(0.5 * a.data)  # overflow-free logistic
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a: Value) -> Value:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),))


def softplus(a: Value) -> Value:
    out = np.logaddexp(0, a.data).astype(a.dtype)

    def bw(g):
        sig = np.exp(a.data - out)  # = sigmoid(a) without overflow
        return (g * sig,)

    return _result(out, (a,), bw)


def exp(a: Value) -> Value:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Value) -> Value:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def maximum(a: Value, floor: float) -> Value:
    """Elementwise ``max(a, floor)``; gradient flows only where ``a > floor``."""
    mask = a.data > floor
    out = np.where(mask, a.data, np.asarray(floor, dtype=a.dtype))
    return _result(out, (a,), lambda g: (g * mask,))


def vsum(a: Value, axis=None, keepdims: bool = False) -> Value:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw)


def vmean(a: Value, axis=None, keepdims: bool = False) -> Value:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return vsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Value, shape: tuple[int, ...]) -> Value:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Value, axes: Sequence[int]) -> Value:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def getitem(a: Value, index) -> Value:
    out = a.data[index]

    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in (index if isinstance(index, tuple) else (index,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), bw)


def concat(xs: Sequence[Value], axis: int = -1) -> Value:
    xs = [as_value(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} along axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.data for x in xs], axis=ax)
    return _result(out, xs, lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(xs: Sequence[Value], axis: int = 0) -> Value:
    xs = [as_value(x) for x in xs]
    if len({x.shape for x in xs}) != 1:
        raise ShapeError(f"stack: shapes differ {[x.shape for x in xs]}")
    out = np.stack([x.data for x in xs], axis=axis)
    ax = axis % out.ndim
    return _result(out, xs, lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(xs))))
