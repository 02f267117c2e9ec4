"""A small tape-free reverse-mode autodiff over 2D float64 arrays.

Only the operations the model and losses need are provided. Each op builds a
node holding its parents and a closure that pushes ``out.grad`` back into
them; :meth:`Tensor.backward` walks the graph in reverse topological order.
"""
from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r}, requires_grad={self.requires_grad})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.shape}")
        if not self._parents:
            raise RuntimeError("backward called before forward: no recorded graph")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, s):
        return scale(self, 1.0 / s)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(data, parents, name):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, name=name, _parents=parents if req else ())


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = _node(a.data @ b.data, (a, b), "matmul")

    def back():
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)
    out._backward = back
    return out


def transpose(a: Tensor) -> Tensor:
    out = _node(a.data.T, (a,), "transpose")
    out._backward = lambda: _accum(a, out.grad.T)
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(a.data + b.data, (a, b), "add")

    def back():
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(out.grad, b.shape))
    out._backward = back
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(a.data - b.data, (a, b), "sub")

    def back():
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, -_unbroadcast(out.grad, b.shape))
    out._backward = back
    return out


def mul(a: Tensor, b: Tensor, grad_mask_b=None) -> Tensor:
    """Broadcasting Hadamard product.

    ``grad_mask_b`` (same shape as ``b``) multiplies b's gradient; frozen mask
    entries pass 0 here so they never receive gradient.
    """
    out = _node(a.data * b.data, (a, b), "hadamard")

    def back():
        _accum(a, _unbroadcast(out.grad * b.data, a.shape))
        gb = _unbroadcast(out.grad * a.data, b.shape)
        _accum(b, gb if grad_mask_b is None else gb * grad_mask_b)
    out._backward = back
    return out


hadamard = mul


def scale(a: Tensor, s: float) -> Tensor:
    out = _node(a.data * s, (a,), "scale")
    out._backward = lambda: _accum(a, out.grad * s)
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _node(y, (a,), "tanh")
    out._backward = lambda: _accum(a, out.grad * (1.0 - y * y))
    return out


def normalize_rows(a: Tensor) -> Tensor:
    """Rows scaled to unit L2 norm. A zero row is an error, not clamped."""
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm row(s) at {np.flatnonzero(norms[:, 0] == 0).tolist()}")
    y = a.data / norms
    out = _node(y, (a,), "normalize_rows")

    def back():
        g = out.grad
        _accum(a, (g - y * np.sum(g * y, axis=1, keepdims=True)) / norms)
    out._backward = back
    return out


def log_softmax(a: Tensor, axis: int) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = _node(y, (a,), "log_softmax")

    def back():
        g = out.grad
        _accum(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))
    out._backward = back
    return out


def weighted_sum(a: Tensor, w: np.ndarray) -> Tensor:
    """sum(a * w) for a constant weight array ``w``."""
    w = np.asarray(w, dtype=np.float64)
    out = _node(np.sum(a.data * w), (a,), "weighted_sum")
    out._backward = lambda: _accum(a, out.grad * w)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _node(np.sum(a.data), (a,), "sum")
    out._backward = lambda: _accum(a, np.broadcast_to(out.grad, a.shape).copy())
    return out


def sum_squares(a: Tensor) -> Tensor:
    out = _node(np.sum(a.data * a.data), (a,), "sum_squares")
    out._backward = lambda: _accum(a, 2.0 * a.data * out.grad)
    return out


def l1_norm(a: Tensor, active=None) -> Tensor:
    """sum |a| over entries where ``active`` is true; subgradient 0 at 0."""
    act = np.ones(a.shape, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    out = _node(np.sum(np.abs(a.data) * act), (a,), "l1")
    out._backward = lambda: _accum(a, out.grad * np.sign(a.data) * act)
    return out


def gather_cols(a: Tensor, index: np.ndarray) -> Tensor:
    n = a.shape[1]
    out = _node(a.data[:, index], (a,), "gather")

    def back():
        g = np.zeros((a.shape[0], n))
        g[:, index] = out.grad
        _accum(a, g)
    out._backward = back
    return out
