"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation returns a new :class:`Tensor` holding its value and, when any
input requires a gradient, a closure mapping the output gradient to input
gradients.  :func:`backward` walks the graph in reverse topological order.
"""
from __future__ import annotations

import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError


class Tensor:
    __slots__ = ("value", "requires_grad", "_parents", "_grad_fn")
    __array_ufunc__ = None      # make ndarray <op> Tensor defer to Tensor's reflected ops

    def __init__(self, value, requires_grad: bool = False, parents=(), grad_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = parents
        self._grad_fn = grad_fn

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, k):
        return power(self, k)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable leaf; gradients are reported under ``name``."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(value, requires_grad=True)
        self.name = name


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _node(value, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, True, tuple(parents), grad_fn)
    return Tensor(value)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * out / b.value, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def power(a, k: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.value ** k, (a,), lambda g: (g * k * a.value ** (k - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _node(out, (a,), lambda g: (0.5 * g / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.value > 0
    return _node(np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _node(out, (a,), lambda g: (g * sig,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.value <= b.value
    return _node(np.where(pick_a, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.value >= b.value
    return _node(np.where(pick_a, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)))


def where(cond, a, b) -> Tensor:
    """Select by a constant boolean mask; unselected branches get no gradient."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _node(np.where(cond, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# ------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul needs operands with ndim >= 2")

    def grad_fn(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.value @ b.value, (a, b), grad_fn)


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), grad_fn)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def logsumexp(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    m = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def grad_fn(g):
        return (np.expand_dims(g, axis) * e / s,)

    return _node(out, (a,), grad_fn)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    return a - reshape(logsumexp(a, axis), _keepdim_shape(a.shape, axis))


def softmax(a, axis=-1) -> Tensor:
    return exp(log_softmax(a, axis))


def _keepdim_shape(shape, axis):
    shape = list(shape)
    shape[axis] = 1
    return tuple(shape)


# ------------------------------------------------------------------- shaping

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1, ax2) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.value, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),))


def expand_dims(a, axis) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.value, axis).shape)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.value[idx], (a,), grad_fn)


def concat(tensors: Sequence, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([t.value for t in ts], axis=axis), ts, grad_fn)


def stack(tensors: Sequence, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _node(np.stack([t.value for t in ts], axis=axis), ts, grad_fn)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(np.broadcast_to(a.value, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),))


# ------------------------------------------------------------------- dropout

def derive_seed(seed: int, tag: str) -> int:
    """Stable 63-bit seed for a named random site."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(tag.encode())])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def dropout(x, p: float, seed: int, training: bool) -> Tensor:
    """Inverted dropout.  The keep mask depends only on ``seed`` and the shape."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= p
    return x * (keep / (1.0 - p))


# ------------------------------------------------------------------- backward

def backward(root: Tensor, params: Iterable[Parameter] | None = None) -> dict:
    """Gradients of scalar ``root`` with respect to every reachable Parameter.

    Parameters listed in ``params`` but unreachable from ``root`` get zeros.
    """
    root = as_tensor(root)
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[str, np.ndarray] = {}
    if params is not None:
        for p in params:
            grads[p.name] = np.zeros(p.shape)
    if not root.requires_grad:
        return grads

    order, seen, stack_ = [], set(), [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    acc = {id(root): np.ones(root.shape)}
    for node in reversed(order):
        g = acc.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            grads[node.name] = grads[node.name] + g if node.name in grads else g
            continue
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            k = id(parent)
            acc[k] = acc[k] + pg if k in acc else pg
    return grads


def numeric_grad(f: Callable[[], float], arr: np.ndarray, index, h: float = 1e-5) -> float:
    """Central finite difference of ``f`` w.r.t. ``arr[index]`` (mutated in place, restored)."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2.0 * h)


def relative_error(a: float, b: float, abs_floor: float = 1e-6) -> float:
    """Relative error, or 0 when both values agree to within ``abs_floor``."""
    diff = abs(a - b)
    if diff < abs_floor:
        return 0.0
    return diff / max(abs(a), abs(b))
