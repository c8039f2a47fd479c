"""Minimal reverse-mode automatic differentiation on float64 arrays.

A Tensor wraps a numpy value plus a backward closure; building an
expression records the tape implicitly through parent links, and ``grad``
replays it once in reverse topological order. The primitive set is exactly
what the policy and loss need: matmul, broadcast add/mul, leaky rectifier,
log, exp, axis sums, softmax, reshape, and two gather flavors. Every
forward result is checked finite so a NaN points at the op that made it.

Tapes are single-use: build the loss, call ``grad``, read ``.grad`` off the
leaves, throw everything away.
"""

from __future__ import annotations

import numpy as np

LEAKY_SLOPE = 0.01


class Tensor:
    __slots__ = ("value", "grad", "requires", "_parents", "_backward", "op")

    def __init__(self, value, parents=(), backward=None, requires=False, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires = requires or any(p.requires for p in parents)
        self._parents = parents
        self._backward = backward
        self.op = op
        if not np.isfinite(self.value).all():
            raise FloatingPointError(f"non-finite value produced by op {op!r}")

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # light sugar; the module-level functions are the real API
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def const(x) -> Tensor:
    return Tensor(x)


def param(x) -> Tensor:
    return Tensor(x, requires=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value + b.value, (a, b), op="add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value * b.value, (a, b), op="mul")

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    out._backward = backward
    return out


def neg(a) -> Tensor:
    return mul(a, const(-1.0))


def sub(a, b) -> Tensor:
    return add(a, neg(_wrap(b)))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    out = Tensor(a.value @ b.value, (a, b), op="matmul")

    def backward(g):
        return g @ b.value.T, a.value.T @ g

    out._backward = backward
    return out


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = _wrap(a)
    mask = a.value > 0
    out = Tensor(np.where(mask, a.value, slope * a.value), (a,), op="leaky_relu")

    def backward(g):
        return (np.where(mask, g, slope * g),)

    out._backward = backward
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        value = np.log(a.value)
    out = Tensor(value, (a,), op="log")

    def backward(g):
        return (g / a.value,)

    out._backward = backward
    return out


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        value = np.exp(a.value)
    out = Tensor(value, (a,), op="exp")

    def backward(g):
        return (g * out.value,)

    out._backward = backward
    return out


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,), op="sum")

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    out._backward = backward
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, (a,), op="softmax")

    def backward(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    out._backward = backward
    return out


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.value.reshape(shape), (a,), op="reshape")

    def backward(g):
        return (g.reshape(a.shape),)

    out._backward = backward
    return out


def concat(parts, axis: int = 0) -> Tensor:
    """Join tensors along an existing axis; gradient splits back."""
    parts = [_wrap(p) for p in parts]
    out = Tensor(np.concatenate([p.value for p in parts], axis=axis),
                 tuple(parts), op="concat")
    sizes = [p.value.shape[axis] for p in parts]

    def backward(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    out._backward = backward
    return out


def gather(a, idx) -> Tensor:
    """1-d index select: out[k] = a[idx[k]]."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=int)
    if a.value.ndim != 1:
        raise ValueError("gather expects a 1-d tensor; use pick for matrices")
    out = Tensor(a.value[idx], (a,), op="gather")

    def backward(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, idx, g)
        return (ga,)

    out._backward = backward
    return out


def pick(a, rows, cols) -> Tensor:
    """Per-row column select on a matrix: out[k] = a[rows[k], cols[k]]."""
    a = _wrap(a)
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    if a.value.ndim != 2:
        raise ValueError("pick expects a 2-d tensor")
    out = Tensor(a.value[rows, cols], (a,), op="pick")

    def backward(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    out._backward = backward
    return out


def logsumexp(a, axis: int = -1) -> Tensor:
    """Row-stable log-sum-exp; the shift is a detached constant, which leaves
    both the value and the gradient exact."""
    a = _wrap(a)
    shift = a.value.max(axis=axis, keepdims=True)
    z = sub(a, const(shift))
    return add(log(tsum(exp(z), axis=axis, keepdims=True)), const(shift))


def log_softmax(a, axis: int = -1) -> Tensor:
    return sub(a, logsumexp(a, axis=axis))


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
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
            if p.requires and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor) -> None:
    """Backpropagate from a scalar loss; leaf gradients land in ``.grad``."""
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if not parent.requires:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad = parent.grad + g


def numeric_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function, for gradient tests."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return out


class Adam:
    """Adaptive-moment optimizer over a dict of named arrays."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            m_hat = self.m[name] / (1 - self.b1**t)
            v_hat = self.v[name] / (1 - self.b2**t)
            params[name] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
