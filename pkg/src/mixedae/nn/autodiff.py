"""Array-valued reverse-mode automatic differentiation over float64 numpy.

The graph is recorded eagerly: every op returns a :class:`Tensor` holding
links ``(parent, vjp)`` where ``vjp`` maps the output gradient to that
parent's gradient contribution. ``Tensor.backward`` walks the graph once in
reverse topological order, overwriting ``grad`` on every reachable node.

Frozen parameters still propagate gradient to their ancestors (a frozen
adversary must stay transparent to the encoder's gradient); only their own
accumulated ``grad`` is zeroed at the end of the walk.
"""

from __future__ import annotations

import numpy as np

from ..errors import GraphError
from . import functional as F


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Node in the autodiff graph. Wraps a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_links")

    def __init__(self, data, requires_grad: bool = False, links=None):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self._links = links if links is not None else []
        self.requires_grad = requires_grad or bool(self._links)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.data.shape}")
        if not self._links and not self.requires_grad:
            raise GraphError("loss is not connected to any recorded operation")
        order = _topo_order(self)
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            g = node.grad
            for parent, vjp in node._links:
                parent.grad = parent.grad + vjp(g)
        for node in order:
            if isinstance(node, Parameter) and node.frozen:
                node.grad = np.zeros_like(node.data)

    # arithmetic sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf. ``frozen=True`` zeroes its gradient after backward."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.frozen = False


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the subgraph that needs gradient."""
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
        for parent, _ in node._links:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _out(data, links) -> Tensor:
    kept = [(p, vjp) for p, vjp in links if p.requires_grad]
    return Tensor(data, links=kept)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def constant(x) -> Tensor:
    return Tensor(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _out(
        a.data + b.data,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ],
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _out(
        a.data - b.data,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(-g, b.data.shape)),
        ],
    )


def neg(a: Tensor) -> Tensor:
    return _out(-a.data, [(a, lambda g: -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _out(
        a.data * b.data,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ],
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    return _out(
        a.data / b.data,
        [
            (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        ],
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _out(
        a.data @ b.data,
        [
            (a, lambda g: g @ b.data.T),
            (b, lambda g: a.data.T @ g),
        ],
    )


def transpose(a: Tensor) -> Tensor:
    return _out(a.data.T, [(a, lambda g: g.T)])


def square(a: Tensor) -> Tensor:
    return _out(a.data * a.data, [(a, lambda g: 2.0 * a.data * g)])


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _out(out, [(a, lambda g: g * out)])


def log(a: Tensor) -> Tensor:
    return _out(np.log(a.data), [(a, lambda g: g / a.data)])


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) via logaddexp for stability at both tails
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return _out(out, [(a, lambda g: g * sig)])


def selu(a: Tensor) -> Tensor:
    grad = F.selu_grad(a.data)
    return _out(F.selu(a.data), [(a, lambda g: g * grad)])


def softmax_rows(a: Tensor) -> Tensor:
    s = F.softmax(a.data)
    def vjp(g):
        return s * (g - (g * s).sum(axis=-1, keepdims=True))
    return _out(s, [(a, vjp)])


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    # subgradient 1 on the closed interval, 0 outside
    mask = (a.data >= lo) & (a.data <= hi)
    return _out(np.clip(a.data, lo, hi), [(a, lambda g: g * mask)])


def sum_all(a: Tensor) -> Tensor:
    return _out(a.data.sum(), [(a, lambda g: np.broadcast_to(g, a.data.shape).copy())])


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape).copy()
    return _out(a.data.sum(axis=axis, keepdims=keepdims), [(a, vjp)])


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _out(
        a.data.mean(),
        [(a, lambda g: np.broadcast_to(g / n, a.data.shape).copy())],
    )


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out
    return _out(a.data[idx], [(a, vjp)])


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Normalize by batch statistics. Returns (output, batch_mean, batch_var).

    Variance is the biased 1/N batch statistic. The x-gradient is the usual
    closed form for that convention:
    dx = gamma/sqrt(v+eps) * (g - mean(g) - xhat * mean(g*xhat)).
    """
    mean = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data

    def vjp_x(g):
        return (gamma.data * inv_std) * (
            g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0)
        )

    t = _out(
        out,
        [
            (x, vjp_x),
            (gamma, lambda g: (g * xhat).sum(axis=0)),
            (beta, lambda g: g.sum(axis=0)),
        ],
    )
    return t, mean, var
