"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation builds a `Var` holding the forward value (float64) and a
vector-Jacobian closure over its parents; `backward` walks the graph in
reverse topological order and accumulates gradients into leaf `Var`s.
float64 is used throughout so central finite differences resolve analytic
gradients at 1e-3 relative error without noise headroom problems.

Inside a `no_grad()` block no graph is recorded, which also serves as the
cheap pure-inference mode.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import StateError

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Var:
    """A float64 ndarray with an optional backward graph attached."""

    __slots__ = ("value", "grad", "_parents", "_vjp", "_leaf")

    def __init__(self, value, parents=(), vjp=None, leaf=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._leaf = leaf
        if _GRAD_ENABLED:
            self._parents = tuple(parents)
            self._vjp = vjp
        else:
            self._parents = ()
            self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Var":
        return Var(self.value, leaf=True)

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Propagate `seed` (default: ones) back to every reachable leaf."""
        if not self._leaf and self._vjp is None:
            raise StateError(
                "no recorded computation graph; the forward pass ran under no_grad()"
            )
        if seed is None:
            seed = np.ones_like(self.value)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.value.shape:
                raise StateError(
                    f"seed shape {seed.shape} does not match output shape {self.value.shape}"
                )

        order: list[Var] = []
        visited: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                pid = id(parent)
                grads[pid] = pg if pid not in grads else grads[pid] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, leaf={self._leaf})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x, leaf=True)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _unbroadcast_batch(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Like _unbroadcast but never touches the trailing two (matrix) axes."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i in range(len(shape) - 2) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Var(out, (a, b), vjp)


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return Var(out, (a, b), vjp)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value * b.value

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Var(out, (a, b), vjp)


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value / b.value

    def vjp(g):
        return (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        )

    return Var(out, (a, b), vjp)


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.ndim < 2 or b.ndim < 2:
        raise StateError("matmul requires operands with ndim >= 2")
    out = a.value @ b.value

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return (
            _unbroadcast_batch(ga, a.value.shape),
            _unbroadcast_batch(gb, b.value.shape),
        )

    return Var(out, (a, b), vjp)


def reshape(a, shape) -> Var:
    a = as_var(a)
    out = a.value.reshape(shape)

    def vjp(g):
        return (g.reshape(a.value.shape),)

    return Var(out, (a,), vjp)


def transpose(a, axes: Sequence[int]) -> Var:
    a = as_var(a)
    axes = tuple(axes)
    out = a.value.transpose(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return Var(out, (a,), vjp)


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return Var(out, tuple(parts), vjp)


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis=axes)
        return (np.broadcast_to(g, a.value.shape),)

    return Var(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    axes = _norm_axes(axis, a.ndim)
    n = float(np.prod([a.value.shape[ax] for ax in axes]))
    out = a.value.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis=axes)
        return (np.broadcast_to(g, a.value.shape) / n,)

    return Var(out, (a,), vjp)


def sqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.value)

    def vjp(g):
        return (g * (0.5 / out),)

    return Var(out, (a,), vjp)


def softmax(a) -> Var:
    """Softmax over the last axis, max-shifted for stability."""
    a = as_var(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Var(out, (a,), vjp)


def gelu(a) -> Var:
    """Exact (erf-based) GELU."""
    a = as_var(a)
    x = a.value
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return Var(out, (a,), vjp)


def sigmoid(a) -> Var:
    a = as_var(a)
    out = expit(a.value)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Var(out, (a,), vjp)


def softplus(a) -> Var:
    """log(1 + exp(x)), computed stably."""
    a = as_var(a)
    out = np.logaddexp(0.0, a.value)

    def vjp(g):
        return (g * expit(a.value),)

    return Var(out, (a,), vjp)
