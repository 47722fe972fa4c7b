"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Graph` is an append-only list of nodes. Every operation computes
its value eagerly and records its operands, so the append order is already a
topological order and :meth:`Graph.backward` simply walks it in reverse.

Example::

    g = Graph()
    theta = g.leaf(np.array([1.0, 2.0]))
    loss = (theta * theta).sum()
    g.backward(loss)
    theta.grad  # array([2., 4.])
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError, UsageError
from .special import digamma, lgamma


@dataclass
class Tensor:
    """Dense value with a lazily allocated gradient buffer of the same shape."""

    values: np.ndarray
    grad: np.ndarray = None

    @property
    def shape(self):
        return self.values.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.values.shape)
        else:
            self.grad += g


@dataclass
class Node:
    kind: str
    operands: tuple
    tensor: Tensor
    attrs: dict = field(default_factory=dict)


class Var:
    """Handle to one node of a graph; supports the usual arithmetic operators."""

    __slots__ = ("graph", "index")
    __array_priority__ = 1000

    def __init__(self, graph, index):
        self.graph = graph
        self.index = index

    @property
    def node(self):
        return self.graph.nodes[self.index]

    @property
    def value(self):
        return self.node.tensor.values

    @property
    def grad(self):
        t = self.node.tensor
        return np.zeros_like(t.values) if t.grad is None else t.grad

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value)

    def _lift(self, other):
        return other if isinstance(other, Var) else self.graph.constant(other)

    def __add__(self, other):
        return self.graph.apply("add", self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.apply("sub", self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.graph.apply("mul_scalar", self, scalar=float(other))
        return self.graph.apply("mul", self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.apply("mul_scalar", self, scalar=-1.0)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise UsageError("division is only supported by a scalar constant")
        return self.graph.apply("mul_scalar", self, scalar=1.0 / float(other))

    def __matmul__(self, other):
        return self.graph.apply("matmul", self, self._lift(other))

    @property
    def T(self):
        return self.graph.apply("transpose", self)

    def sum(self, axis=None):
        return self.graph.apply("sum", self, axis=axis)

    def mean(self, axis=None):
        return self.graph.apply("mean", self, axis=axis)

    def __repr__(self):
        return f"Var(index={self.index}, kind={self.node.kind!r}, shape={self.shape})"


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b, kind):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(
            f"{kind}: operand shapes {a.shape} and {b.shape} do not broadcast") from None


# Each forward rule maps (operand values, attrs) -> value.
# Each backward rule maps (upstream grad, operand values, output value, attrs)
# -> tuple of operand grads (None for operands that receive nothing).

def _fwd_matmul(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _bwd_matmul(g, vals, out, attrs):
    a, b = vals
    return g @ b.T, a.T @ g


def _fwd_add(vals, attrs):
    _broadcast_shape(*vals, "add")
    return vals[0] + vals[1]


def _bwd_add(g, vals, out, attrs):
    return _unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)


def _fwd_sub(vals, attrs):
    _broadcast_shape(*vals, "sub")
    return vals[0] - vals[1]


def _bwd_sub(g, vals, out, attrs):
    return _unbroadcast(g, vals[0].shape), -_unbroadcast(g, vals[1].shape)


def _fwd_mul(vals, attrs):
    _broadcast_shape(*vals, "mul")
    return vals[0] * vals[1]


def _bwd_mul(g, vals, out, attrs):
    a, b = vals
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _fwd_log(vals, attrs):
    (a,) = vals
    if np.any(a <= 0):
        raise DomainError("log of a non-positive value")
    return np.log(a)


def _fwd_lgamma(vals, attrs):
    (a,) = vals
    if np.any(a <= 0):
        raise DomainError("lgamma is only differentiable here for positive arguments")
    return lgamma(a)


def _fwd_log_softmax(vals, attrs):
    (z,) = vals
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _bwd_log_softmax(g, vals, out, attrs):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _fwd_sum(vals, attrs):
    return np.asarray(vals[0].sum(axis=attrs["axis"]), dtype=np.float64)


def _bwd_sum(g, vals, out, attrs):
    (a,) = vals
    axis = attrs["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape),)


def _fwd_mean(vals, attrs):
    return np.asarray(vals[0].mean(axis=attrs["axis"]), dtype=np.float64)


def _bwd_mean(g, vals, out, attrs):
    (a,) = vals
    axis = attrs["axis"]
    n = a.size if axis is None else a.shape[axis]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, a.shape),)


def _fwd_index_rows(vals, attrs):
    return vals[0][attrs["rows"]]


def _bwd_index_rows(g, vals, out, attrs):
    full = np.zeros_like(vals[0])
    np.add.at(full, attrs["rows"], g)
    return (full,)


def _fwd_pick(vals, attrs):
    (a,) = vals
    cols = attrs["cols"]
    if a.ndim != 2 or len(cols) != a.shape[0]:
        raise ConfigurationError(f"pick: need one column index per row of {a.shape}")
    if len(cols) and (cols.min() < 0 or cols.max() >= a.shape[1]):
        raise ConfigurationError("pick: column index out of range")
    return a[np.arange(a.shape[0]), cols]


def _bwd_pick(g, vals, out, attrs):
    full = np.zeros_like(vals[0])
    full[np.arange(full.shape[0]), attrs["cols"]] = g
    return (full,)


def _fwd_slice(vals, attrs):
    (a,) = vals
    off, shape = attrs["offset"], attrs["shape"]
    n = int(np.prod(shape))
    if a.ndim != 1 or off < 0 or off + n > a.size:
        raise ConfigurationError(f"slice: [{off}, {off + n}) outside vector of size {a.size}")
    return a[off:off + n].reshape(shape)


def _bwd_slice(g, vals, out, attrs):
    full = np.zeros_like(vals[0])
    off = attrs["offset"]
    full[off:off + g.size] = g.ravel()
    return (full,)


_RULES = {
    "matmul": (_fwd_matmul, _bwd_matmul),
    "transpose": (lambda v, a: v[0].T, lambda g, v, o, a: (g.T,)),
    "add": (_fwd_add, _bwd_add),
    "sub": (_fwd_sub, _bwd_sub),
    "mul": (_fwd_mul, _bwd_mul),
    "mul_scalar": (lambda v, a: v[0] * a["scalar"], lambda g, v, o, a: (g * a["scalar"],)),
    "relu": (lambda v, a: np.maximum(v[0], 0.0), lambda g, v, o, a: (g * (v[0] > 0),)),
    "tanh": (lambda v, a: np.tanh(v[0]), lambda g, v, o, a: (g * (1.0 - o * o),)),
    "exp": (lambda v, a: np.exp(v[0]), lambda g, v, o, a: (g * o,)),
    "log": (_fwd_log, lambda g, v, o, a: (g / v[0],)),
    "log_softmax": (_fwd_log_softmax, _bwd_log_softmax),
    "lgamma": (_fwd_lgamma, lambda g, v, o, a: (g * digamma(v[0]),)),
    "sum": (_fwd_sum, _bwd_sum),
    "mean": (_fwd_mean, _bwd_mean),
    "index_rows": (_fwd_index_rows, _bwd_index_rows),
    "pick": (_fwd_pick, _bwd_pick),
    "slice": (_fwd_slice, _bwd_slice),
}

OP_KINDS = tuple(_RULES)


class Graph:
    """Append-only computation tape."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, kind, operands, values, attrs=None):
        values = np.asarray(values, dtype=np.float64)
        self.nodes.append(Node(kind, tuple(operands), Tensor(values), attrs or {}))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, values):
        """A differentiable input. The array is copied."""
        return self._append("leaf", (), np.array(values, dtype=np.float64, copy=True))

    def constant(self, values):
        """A non-trainable input; it still receives a gradient if reached."""
        return self._append("constant", (), np.asarray(values, dtype=np.float64))

    def apply(self, kind, *operands, **attrs):
        """Append ``kind`` applied to ``operands`` and return the new node."""
        try:
            forward, _ = _RULES[kind]
        except KeyError:
            raise UsageError(f"unknown op kind {kind!r}") from None
        idx = []
        for op in operands:
            if not isinstance(op, Var) or op.graph is not self:
                raise UsageError("operands must be nodes of this graph")
            idx.append(op.index)
        vals = [self.nodes[i].tensor.values for i in idx]
        return self._append(kind, idx, forward(vals, attrs), attrs)

    def zero_grad(self):
        for node in self.nodes:
            node.tensor.grad = None

    def backward(self, root):
        """Fill ``grad`` of every node reachable from the scalar ``root``."""
        root_t = root.node.tensor
        if root_t.values.size != 1:
            raise UsageError(f"backward needs a scalar root, got shape {root_t.shape}")
        root_t.accumulate(np.ones_like(root_t.values))
        for i in range(root.index, -1, -1):
            node = self.nodes[i]
            g = node.tensor.grad
            if g is None or not node.operands:
                continue
            vals = [self.nodes[j].tensor.values for j in node.operands]
            grads = _RULES[node.kind][1](g, vals, node.tensor.values, node.attrs)
            for j, gj in zip(node.operands, grads):
                if gj is not None:
                    self.nodes[j].tensor.accumulate(gj)


# Functional spellings of the unary ops.

def relu(x):
    return x.graph.apply("relu", x)


def tanh(x):
    return x.graph.apply("tanh", x)


def exp(x):
    return x.graph.apply("exp", x)


def log(x):
    return x.graph.apply("log", x)


def log_softmax(x):
    """Row-wise log-softmax along the last axis (max-shifted)."""
    return x.graph.apply("log_softmax", x)


def softmax(x):
    return exp(log_softmax(x))


def lgamma_(x):
    return x.graph.apply("lgamma", x)


def index_rows(x, rows):
    return x.graph.apply("index_rows", x, rows=np.asarray(rows, dtype=np.intp))


def pick(x, cols):
    """``x[i, cols[i]]`` for every row ``i``."""
    return x.graph.apply("pick", x, cols=np.asarray(cols, dtype=np.intp))


def take_slice(vec, offset, shape):
    """View ``vec[offset:offset+prod(shape)]`` reshaped to ``shape``."""
    return vec.graph.apply("slice", vec, offset=int(offset), shape=tuple(int(s) for s in shape))


def value_and_grad(fn, theta):
    """Evaluate ``fn(graph, theta_var)`` and return (value, d value / d theta)."""
    g = Graph()
    t = g.leaf(theta)
    out = fn(g, t)
    g.backward(out)
    return out.item(), t.grad.copy()


def grad_check(fn, theta, eps=1e-5):
    """Largest relative gap between the tape gradient and central differences.

    ``fn(graph, theta_var)`` must return a scalar node. The error for each
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    theta = np.array(theta, dtype=np.float64)
    value, analytic = value_and_grad(fn, theta)
    if not np.isfinite(value):
        raise DomainError("function is not finite at theta")

    def f(x):
        g = Graph()
        v = fn(g, g.leaf(x)).item()
        if not np.isfinite(v):
            raise DomainError("function is not finite in the eps-neighbourhood")
        return v

    flat = theta.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += eps
        down = flat.copy()
        down[i] -= eps
        numeric[i] = (f(up.reshape(theta.shape)) - f(down.reshape(theta.shape))) / (2 * eps)
    a = analytic.ravel()
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a)), initial=0.0))
