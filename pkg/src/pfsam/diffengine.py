"""Dense reverse-mode differentiation over numpy float64 arrays.

A :class:`Graph` is an append-only tape. Every primitive appends one node, so
append order is a valid topological order and :func:`backward` simply walks the
tape in reverse. Vector-Jacobian products are themselves written in terms of
primitives, which means that with ``create_graph=True`` the backward pass is
recorded on the same tape and can be differentiated again. That is how
:func:`hvp` obtains exact Hessian-vector products.

Example::

    g = Graph()
    x = g.leaf([3.0])
    y = (x * x).sum()
    backward(y, [x])[0]   # array([6.])
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NumericError(ArithmeticError):
    """A primitive produced a non-finite value."""


class UsageError(ValueError):
    """Engine API misuse (non-scalar output, dimension mismatch, ...)."""


class Node:
    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple, vjp: Optional[Callable]):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class Graph:
    """Append-only record of primitive applications.

    A graph (and the :class:`Var` objects pointing into it) must stay on one
    thread; independent graphs share nothing.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[int] = []
        self.recording = True

    def leaf(self, value, name: Optional[str] = None) -> "Var":
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"leaf {name or len(self.nodes)} has non-finite values")
        idx = len(self.nodes)
        self.nodes.append(Node("leaf", (), None))
        self.leaves.append(idx)
        return Var(arr, self, idx, name)

    def constant(self, value) -> "Var":
        return Var(np.asarray(value, dtype=np.float64), self, None)

    @contextmanager
    def paused(self):
        """Evaluate primitives without appending nodes."""
        prev = self.recording
        self.recording = False
        try:
            yield
        finally:
            self.recording = prev

    def __len__(self):
        return len(self.nodes)


class Var:
    """A value living on a graph. ``index is None`` marks a constant."""

    __slots__ = ("value", "graph", "index", "name")
    __array_priority__ = 1000

    def __init__(self, value: np.ndarray, graph: Graph, index: Optional[int], name=None):
        self.value = value
        self.graph = graph
        self.index = index
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.index is not None

    def __repr__(self):
        tag = "const" if self.index is None else f"node {self.index}"
        return f"Var({tag}, shape={self.shape})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self._lift(other)))

    def __rsub__(self, other):
        return add(self._lift(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(self._lift(other)))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _graph_of(inputs: Sequence[Var]) -> Graph:
    return inputs[0].graph


def _finite(value: np.ndarray) -> bool:
    # a sum is non-finite whenever any entry is; confirm elementwise only then
    with np.errstate(over="ignore", invalid="ignore"):
        if math.isfinite(value.sum()):
            return True
    return bool(np.isfinite(value).all())


def _emit(op: str, value: np.ndarray, inputs: tuple, vjp: Callable) -> Var:
    graph = _graph_of(inputs)
    if not _finite(value):
        raise NumericError(f"{op} produced non-finite output at node {len(graph.nodes)}")
    if graph.recording and any(v.index is not None for v in inputs):
        idx = len(graph.nodes)
        graph.nodes.append(Node(op, inputs, vjp))
        return Var(value, graph, idx)
    return Var(value, graph, None)


def _check_broadcast(op, a, b):
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- linear / structural primitives -------------------------------------------------


def add(a: Var, b: Var) -> Var:
    _check_broadcast("add", a, b)

    def vjp(g):
        return (sum_to(g, a.shape), sum_to(g, b.shape))

    return _emit("add", a.value + b.value, (a, b), vjp)


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return _emit("scale", a.value * c, (a,), lambda g: (scale(g, c),))


def neg(a: Var) -> Var:
    return scale(a, -1.0)


def sum_to(a: Var, shape) -> Var:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    value = a.value
    lead = value.ndim - len(shape)
    if lead:
        value = value.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and value.shape[i] != 1)
    if axes:
        value = value.sum(axis=axes, keepdims=True)
    src = a.shape
    return _emit("sum_to", value.reshape(shape), (a,), lambda g: (broadcast_to(g, src),))


def broadcast_to(a: Var, shape) -> Var:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    try:
        value = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: {src} -> {shape}") from None
    return _emit("broadcast_to", value, (a,), lambda g: (sum_to(g, src),))


def reshape(a: Var, shape) -> Var:
    src = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {src} -> {shape}") from None
    return _emit("reshape", value, (a,), lambda g: (reshape(g, src),))


def transpose(a: Var) -> Var:
    """Swap the last two axes."""
    if a.value.ndim < 2:
        raise ShapeError(f"transpose expects at least 2-d input, got {a.shape}")
    return _emit("transpose", np.swapaxes(a.value, -1, -2).copy(), (a,), lambda g: (transpose(g),))


def matmul(a: Var, b: Var) -> Var:
    """2-d matrix product, or a batched product of two 3-d stacks."""
    ok = a.value.ndim == b.value.ndim and a.value.ndim in (2, 3) and a.shape[-1] == b.shape[-2]
    if ok and a.value.ndim == 3:
        ok = a.shape[0] == b.shape[0]
    if not ok:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def vjp(g):
        return (matmul(g, transpose(b)), matmul(transpose(a), g))

    return _emit("matmul", np.matmul(a.value, b.value), (a, b), vjp)


def sum_(a: Var, axis=None, keepdims=False) -> Var:
    src = a.shape
    kept = np.sum(a.value, axis=axis, keepdims=True).shape

    def vjp(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _emit("sum", np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Var, axis=None, keepdims=False) -> Var:
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def segment(flat: Var, offset: int, shape) -> Var:
    """Slice ``[offset, offset + prod(shape))`` of the last axis, reshaped to ``shape``.

    Leading axes (a stack of parameter vectors) are kept.
    """
    shape = tuple(shape)
    size = int(np.prod(shape))
    total = flat.shape[-1]
    lead = flat.shape[:-1]
    if offset < 0 or offset + size > total:
        raise ShapeError(f"segment [{offset}:{offset + size}] outside vector of {flat.shape}")
    value = flat.value[..., offset:offset + size].reshape(lead + shape)
    return _emit("segment", value, (flat,), lambda g: (embed(g, offset, total, shape),))


def embed(a: Var, offset: int, total: int, shape=None) -> Var:
    """Place trailing block ``shape`` of ``a`` into zeros of last-axis length ``total``."""
    shape = a.shape if shape is None else tuple(shape)
    lead = a.shape[:a.value.ndim - len(shape)]
    size = int(np.prod(shape))
    value = np.zeros(lead + (total,))
    value[..., offset:offset + size] = a.value.reshape(lead + (size,))
    return _emit("embed", value, (a,), lambda g: (segment(g, offset, shape),))


def gather(a: Var, index) -> Var:
    """Row-wise pick: ``out[i] = a[i, index[i]]``."""
    index = np.asarray(index, dtype=np.int64)
    if a.value.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"gather: {a.shape} with index {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise ShapeError("gather: index out of range")
    width = a.shape[1]
    rows = np.arange(a.shape[0])
    return _emit("gather", a.value[rows, index], (a,), lambda g: (scatter(g, index, width),))


def scatter(a: Var, index, width: int) -> Var:
    """Inverse of :func:`gather`: zeros of shape (n, width) with a[i] at index[i]."""
    value = np.zeros((a.shape[0], width))
    value[np.arange(a.shape[0]), index] = a.value
    return _emit("scatter", value, (a,), lambda g: (gather(g, index),))


# --- nonlinear primitives -------------------------------------------------------


def mul(a: Var, b: Var) -> Var:
    _check_broadcast("mul", a, b)

    def vjp(g):
        return (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape))

    return _emit("mul", a.value * b.value, (a, b), vjp)


def reciprocal(a: Var) -> Var:
    if np.any(a.value == 0):
        raise NumericError("reciprocal of zero")
    out = None

    def vjp(g):
        return (neg(mul(g, mul(out, out))),)

    out = _emit("reciprocal", 1.0 / a.value, (a,), vjp)
    return out


def relu(a: Var) -> Var:
    # derivative at exactly 0 is 0
    mask = (a.value > 0).astype(np.float64)
    return _emit("relu", a.value * mask, (a,), lambda g: (mul(g, a.graph.constant(mask)),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Var) -> Var:
    out = None

    def vjp(g):
        return (mul(g, add(out, neg(mul(out, out)))),)

    out = _emit("sigmoid", _sigmoid(a.value), (a,), vjp)
    return out


def exp(a: Var) -> Var:
    out = None

    def vjp(g):
        return (mul(g, out),)

    with np.errstate(over="ignore"):
        value = np.exp(a.value)
    out = _emit("exp", value, (a,), vjp)
    return out


def log(a: Var) -> Var:
    if np.any(a.value <= 0):
        raise NumericError("log of non-positive value")
    return _emit("log", np.log(a.value), (a,), lambda g: (mul(g, reciprocal(a)),))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Var) -> Var:
    """Softmax over the last axis."""
    out = None

    def vjp(g):
        inner = sum_(mul(g, out), axis=-1, keepdims=True)
        return (mul(out, add(g, neg(inner))),)

    out = _emit("softmax", _softmax(a.value), (a,), vjp)
    return out


def logsumexp(a: Var) -> Var:
    """Log-sum-exp over the last axis (reduces that axis)."""
    m = a.value.max(axis=-1, keepdims=True)
    value = (m + np.log(np.exp(a.value - m).sum(axis=-1, keepdims=True)))[..., 0]
    kept = a.shape[:-1] + (1,)

    def vjp(g):
        return (mul(reshape(g, kept), softmax(a)),)

    return _emit("logsumexp", value, (a,), vjp)


# --- differentiation ------------------------------------------------------------


def backward(out: Var, wrt: Sequence[Var], create_graph: bool = False) -> list:
    """Gradient of scalar ``out`` with respect to each Var in ``wrt``.

    Returns numpy arrays, or Vars when ``create_graph`` is set (so they can be
    differentiated again). Leaves that ``out`` does not depend on get zeros.
    """
    if out.value.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {out.shape}")
    graph = out.graph
    targets = {v.index: v for v in wrt if v.index is not None}
    found: dict[int, Var] = {}
    if out.index is not None:
        grads: dict[int, Var] = {out.index: graph.constant(np.ones(out.shape))}
        ctx = graph.paused() if not create_graph else _noop()
        with ctx:
            for i in range(out.index, -1, -1):
                g = grads.pop(i, None)
                if g is None:
                    continue
                if i in targets:
                    found[i] = g
                node = graph.nodes[i]
                if node.vjp is None:
                    continue
                for inp, ig in zip(node.inputs, node.vjp(g)):
                    if inp.index is None or ig is None:
                        continue
                    prev = grads.get(inp.index)
                    grads[inp.index] = ig if prev is None else add(prev, ig)
    result = []
    for v in wrt:
        g = found.get(v.index) if v.index is not None else None
        if g is None:
            g = graph.constant(np.zeros(v.shape))
        result.append(g if create_graph else g.value.copy())
    return result


@contextmanager
def _noop():
    yield


LossBuilder = Callable[[Graph, Var], Var]


def value_and_grad(loss_builder: LossBuilder, theta: np.ndarray):
    """Evaluate a scalar loss of a flat parameter vector and its gradient."""
    graph = Graph()
    leaf = graph.leaf(theta)
    loss = loss_builder(graph, leaf)
    (grad,) = backward(loss, [leaf])
    return float(loss.value), grad


def hvp(loss_builder: LossBuilder, theta, v) -> np.ndarray:
    """Exact Hessian-vector product by differentiating <grad L, v>."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if theta.shape != v.shape or theta.ndim != 1:
        raise UsageError(f"hvp: params {theta.shape} vs direction {v.shape}")
    graph = Graph()
    leaf = graph.leaf(theta)
    loss = loss_builder(graph, leaf)
    (grad,) = backward(loss, [leaf], create_graph=True)
    inner = sum_(mul(grad, graph.constant(v)))
    (hv,) = backward(inner, [leaf])
    return hv
