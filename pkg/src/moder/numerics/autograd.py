"""Tape-style reverse-mode differentiation over float64 numpy arrays.

Every operation on a :class:`Tensor` that has at least one input requiring
gradients records its parents and a closure mapping the output adjoint to the
input adjoints.  :func:`backward` walks the recorded graph once, collects the
adjoints of named leaves and then releases the graph; a second call on the
same loss raises :class:`~moder.errors.UsageError`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from moder.errors import DimensionError, UsageError

SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946

_GELU_C = np.sqrt(2.0 / np.pi)


class Tensor:
    """A float64 array that optionally takes part in a recorded graph."""

    __slots__ = ("value", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(value: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(value)


# --- elementwise binary ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.value, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * out / b.value, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul {a.shape} @ {b.shape}")

    def backward_fn(g):
        av, bv = a.value, b.value
        ga = gb = None
        if a.ndim == 1 and b.ndim == 1:
            ga, gb = g * bv, g * av
        elif a.ndim == 1:
            ga = bv @ g if a.requires_grad else None
            gb = np.outer(av, g) if b.requires_grad else None
        elif b.ndim == 1:
            ga = np.outer(g, bv) if a.requires_grad else None
            gb = av.T @ g if b.requires_grad else None
        else:
            ga = g @ bv.T if a.requires_grad else None
            gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.value @ b.value, (a, b), backward_fn)


# --- unary -------------------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_tensor(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _stable_sigmoid(x),))


def selu(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    neg_part = SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
    out = SELU_SCALE * np.where(x > 0, x, neg_part)
    return _make(out, (a,), lambda g: (g * (SELU_SCALE * np.where(x > 0, 1.0, neg_part + SELU_ALPHA)),))


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.value
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * dx,)

    return _make(out, (a,), backward_fn)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


# --- reductions and shape ----------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.T, (a,), lambda g: (g.T,))


def take(a, index) -> Tensor:
    """Fancy or basic indexing; repeated indices accumulate in the backward pass."""
    a = as_tensor(a)

    def backward_fn(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.value[index], (a,), backward_fn)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make(out, parts, lambda g: tuple(np.split(g, sizes, axis=axis)))


# --- backward ------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Differentiate a scalar ``loss`` and return adjoints of named leaves.

    Leaves created without ``requires_grad`` (frozen parameters, data) get no
    entry.  The graph is released afterwards.
    """
    if loss._consumed:
        raise UsageError("backward() called twice on the same graph")
    if loss.value.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        loss._consumed = True
        return {}

    order = _topo_order(loss)
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    grads: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.name is not None:
                grads[node.name] = grads[node.name] + g if node.name in grads else g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            adjoints[key] = adjoints[key] + pg if key in adjoints else pg
    for node in order:
        if node._backward is not None:
            node._consumed = True
            node._backward = None
            node._parents = ()
    loss._consumed = True
    return grads


def leaves(values: Iterable[tuple[str, np.ndarray, bool]]) -> dict[str, Tensor]:
    """Build named leaf tensors from ``(name, value, trainable)`` triples."""
    return {name: Tensor(v, requires_grad=t, name=name) for name, v, t in values}
