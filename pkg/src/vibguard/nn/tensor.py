"""Reverse-mode automatic differentiation over numpy arrays.

Each operation returns a `Tensor` that remembers its parents and a closure
mapping the output gradient to one gradient per parent. `backward` walks the
graph once, deposits gradients on leaf tensors, then releases the graph.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import InvalidInputError, StateError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False

    # ------------------------------------------------------------ plumbing
    @staticmethod
    def from_op(data, parents: tuple, backward) -> "Tensor":
        """Wrap an op result; `backward(g)` must return one gradient (or None) per parent."""
        out = Tensor(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            for p in parents:
                if p._consumed:
                    raise StateError("operand belongs to a consumed tape")
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # ---------------------------------------------------------- backward
    def backward(self, retain_graph: bool = False):
        if self._consumed:
            raise StateError("backward called on a consumed tape")
        if self.data.size != 1:
            raise InvalidInputError("backward needs a scalar loss")
        if not self.requires_grad:
            raise StateError("loss does not depend on any tensor that requires grad")
        order = []
        seen = set()
        stack = [(self, False)]
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
                if p._consumed:
                    raise StateError("graph shares nodes with a consumed tape")
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    pg = _unbroadcast(pg, p.shape)
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        if not retain_graph:
            for node in order:
                if node._backward is not None:
                    node._parents = ()
                    node._backward = None
                    node._consumed = True

    # -------------------------------------------------------- arithmetic
    def __add__(self, other):
        other = _lift(other)
        return Tensor.from_op(self.data + other.data, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        return Tensor.from_op(self.data - other.data, (self, other), lambda g: (g, -g))

    def __rsub__(self, other):
        return _lift(other) - self

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        return Tensor.from_op(a * b, (self, other), lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        return Tensor.from_op(a / b, (self, other), lambda g: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __neg__(self):
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        a = self.data
        return Tensor.from_op(a ** p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, idx):
        shape = self.shape
        basic = _is_basic_index(idx)

        def back(g):
            full = np.zeros(shape)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor.from_op(self.data[idx], (self,), back)

    # -------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor.from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def max(self, axis: int = -1, keepdims: bool = False):
        """Maximum along one axis; ties send the gradient to the first maximiser."""
        a = self.data
        idx = np.expand_dims(a.argmax(axis=axis), axis)
        y = np.take_along_axis(a, idx, axis=axis)
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            np.put_along_axis(full, idx, g if keepdims else np.expand_dims(g, axis), axis=axis)
            return (full,)

        return Tensor.from_op(y if keepdims else np.squeeze(y, axis), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ------------------------------------------------------------ shape
    def reshape(self, *shape):
        shape = shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape
        old = self.shape
        return Tensor.from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor.from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    @property
    def T(self):
        return self.transpose()

    # ------------------------------------------------------- elementwise
    def exp(self):
        y = np.exp(self.data)
        return Tensor.from_op(y, (self,), lambda g: (g * y,))

    def log(self):
        a = self.data
        return Tensor.from_op(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        y = np.sqrt(self.data)
        return Tensor.from_op(y, (self,), lambda g: (g * 0.5 / y,))

    def abs(self):
        s = np.sign(self.data)
        return Tensor.from_op(np.abs(self.data), (self,), lambda g: (g * s,))

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor.from_op(y, (self,), lambda g: (g * (1 - y * y),))

    def sigmoid(self):
        y = _sigmoid(self.data)
        return Tensor.from_op(y, (self,), lambda g: (g * y * (1 - y),))

    def relu(self):
        m = self.data > 0
        return Tensor.from_op(self.data * m, (self,), lambda g: (g * m,))

    def leaky_relu(self, slope: float = 0.2):
        k = np.where(self.data > 0, 1.0, slope)
        return Tensor.from_op(self.data * k, (self,), lambda g: (g * k,))

    def softplus(self):
        a = self.data
        y = np.maximum(a, 0) + np.log1p(np.exp(-np.abs(a)))
        return Tensor.from_op(y, (self,), lambda g: (g * _sigmoid(a),))

    def clip(self, lo: float, hi: float):
        a = self.data
        m = (a >= lo) & (a <= hi)
        return Tensor.from_op(np.clip(a, lo, hi), (self,), lambda g: (g * m,))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise InvalidInputError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise InvalidInputError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g

    return Tensor.from_op(A @ B, (a, b), back)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor.from_op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back)


def pad_last(x: Tensor, left: int, right: int) -> Tensor:
    width = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    n = x.shape[-1]
    return Tensor.from_op(np.pad(x.data, width), (x,), lambda g: (g[..., left : left + n],))


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    return Tensor.from_op(np.where(mask, a.data, b.data), (a, b), lambda g: (g * mask, g * ~mask))
