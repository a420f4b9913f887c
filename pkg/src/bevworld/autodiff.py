"""Reverse-mode differentiable arrays.

A `Value` wraps a float64 numpy array together with a same-shape gradient
buffer and its position in a per-step computation graph. Primitives build the
graph eagerly; `backward(root)` runs the reverse sweep from a scalar root and
*adds* into each reachable `grad` buffer, so calling it twice (or on two
different roots) accumulates, matching the linearity of differentiation.

Broadcasting follows trailing-dimension alignment only (numpy's rule): shapes
are right-aligned and each dimension must match or be 1. Anything fancier
has to go through an explicit reshape/broadcast.

Division and powers are intentionally absent from the primitive set; compose
reciprocals as exp(-log(x)) for positive x.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class UnknownOpError(ValueError):
    """Raised for an op tag outside the primitive catalog."""


_node_ids = itertools.count()


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Value:
    """Array node in the computation graph.

    data/grad are C-contiguous float64 arrays of identical shape; grad is
    all-zero at creation and after reset_grad(). Interior nodes created by
    primitives carry a backward closure returning one gradient contribution
    per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "_adj")

    # keep numpy from intercepting `ndarray <op> Value`
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        # np.ascontiguousarray would promote 0-d to 1-d; keep true scalars 0-d
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._adj = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def reset_grad(self) -> None:
        self.grad[...] = 0.0

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_value(other))

    def __radd__(self, other):
        return add(_as_value(other), self)

    def __sub__(self, other):
        return sub(self, _as_value(other))

    def __rsub__(self, other):
        return sub(_as_value(other), self)

    def __mul__(self, other):
        return mul(self, _as_value(other))

    def __rmul__(self, other):
        return mul(_as_value(other), self)

    def __neg__(self):
        return mul(self, Value(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_value(other))


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make_node(data: np.ndarray, parents: Sequence[Value], backward: Callable) -> Value:
    out = Value(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    for da, db in zip(a.shape[::-1], b.shape[::-1]):
        if da != db and da != 1 and db != 1:
            raise ShapeMismatchError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# primitives


def add(a: Value, b: Value) -> Value:
    a, b = _as_value(a), _as_value(b)
    _check_broadcast("add", a.data, b.data)
    return _make_node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a: Value, b: Value) -> Value:
    a, b = _as_value(a), _as_value(b)
    _check_broadcast("sub", a.data, b.data)
    return _make_node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a: Value, b: Value) -> Value:
    a, b = _as_value(a), _as_value(b)
    _check_broadcast("mul", a.data, b.data)
    return _make_node(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def matmul(a: Value, b: Value) -> Value:
    """Matrix product for 1-D/2-D operands (numpy semantics)."""
    a, b = _as_value(a), _as_value(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeMismatchError(f"matmul: only 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _back(g):
        a2 = ad.reshape(1, -1) if ad.ndim == 1 else ad
        b2 = bd.reshape(-1, 1) if bd.ndim == 1 else bd
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(ad.shape)
        gb = (a2.T @ g2).reshape(bd.shape)
        return ga, gb

    return _make_node(ad @ bd, (a, b), _back)


def _axis_tuple(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def vsum(a: Value, axis=None, keepdims: bool = False) -> Value:
    a = _as_value(a)
    axes = _axis_tuple(axis, a.data.ndim)
    shape = a.data.shape

    def _back(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make_node(a.data.sum(axis=axes, keepdims=keepdims), (a,), _back)


def vmean(a: Value, axis=None, keepdims: bool = False) -> Value:
    a = _as_value(a)
    axes = _axis_tuple(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    shape = a.data.shape

    def _back(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape) / count,)

    return _make_node(a.data.mean(axis=axes, keepdims=keepdims), (a,), _back)


def exp(a: Value) -> Value:
    a = _as_value(a)
    out = np.exp(a.data)
    return _make_node(out, (a,), lambda g: (g * out,))


def log(a: Value) -> Value:
    a = _as_value(a)
    return _make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Value) -> Value:
    a = _as_value(a)
    out = np.tanh(a.data)
    return _make_node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Value) -> Value:
    a = _as_value(a)
    out = _sigmoid(a.data)
    return _make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Value) -> Value:
    a = _as_value(a)
    out = np.logaddexp(0.0, a.data)
    return _make_node(out, (a,), lambda g: (g * _sigmoid(a.data),))


def relu(a: Value) -> Value:
    a = _as_value(a)
    mask = a.data > 0
    return _make_node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def square(a: Value) -> Value:
    a = _as_value(a)
    return _make_node(a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


def slice_(a: Value, index) -> Value:
    """Slice with a tuple of `slice` objects (no integer collapsing)."""
    a = _as_value(a)
    if not isinstance(index, tuple):
        index = (index,)
    if not all(isinstance(ix, slice) for ix in index):
        raise ShapeMismatchError("slice: index must be a tuple of slice objects")
    out = a.data[index]

    def _back(g):
        gx = np.zeros_like(a.data)
        gx[index] = g
        return (gx,)

    return _make_node(out.copy(), (a,), _back)


def concat(parts: Sequence[Value], axis: int = 0) -> Value:
    parts = [_as_value(p) for p in parts]
    if not parts:
        raise ShapeMismatchError("concat: empty input list")
    datas = [p.data for p in parts]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as e:
        raise ShapeMismatchError(f"concat: {e}") from None
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def _back(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _make_node(out, tuple(parts), _back)


def reshape(a: Value, shape) -> Value:
    a = _as_value(a)
    shape = tuple(shape)
    old = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot view {old} as {shape}") from None
    return _make_node(out, (a,), lambda g: (g.reshape(old),))


def broadcast_to(a: Value, shape) -> Value:
    a = _as_value(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeMismatchError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return _make_node(out.copy(), (a,), lambda g: (_unbroadcast(g, a.data.shape),))


def softmax(a: Value, axis: int = -1) -> Value:
    a = _as_value(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _back(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _make_node(out, (a,), _back)


_PRIMITIVES = {
    "add": lambda inputs, attrs: add(*inputs),
    "sub": lambda inputs, attrs: sub(*inputs),
    "mul": lambda inputs, attrs: mul(*inputs),
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "sum": lambda inputs, attrs: vsum(inputs[0], **attrs),
    "mean": lambda inputs, attrs: vmean(inputs[0], **attrs),
    "exp": lambda inputs, attrs: exp(inputs[0]),
    "log": lambda inputs, attrs: log(inputs[0]),
    "tanh": lambda inputs, attrs: tanh(inputs[0]),
    "sigmoid": lambda inputs, attrs: sigmoid(inputs[0]),
    "softplus": lambda inputs, attrs: softplus(inputs[0]),
    "relu": lambda inputs, attrs: relu(inputs[0]),
    "slice": lambda inputs, attrs: slice_(inputs[0], attrs["index"]),
    "concat": lambda inputs, attrs: concat(inputs, **attrs),
    "reshape": lambda inputs, attrs: reshape(inputs[0], attrs["shape"]),
    "broadcast": lambda inputs, attrs: broadcast_to(inputs[0], attrs["shape"]),
    "softmax-over-axis": lambda inputs, attrs: softmax(inputs[0], **attrs),
    "square": lambda inputs, attrs: square(inputs[0]),
}


def apply_primitive(op_tag: str, inputs: Sequence[Value], attrs: dict | None = None) -> Value:
    """Dispatch one primitive by tag; the catalog is closed."""
    fn = _PRIMITIVES.get(op_tag)
    if fn is None:
        raise UnknownOpError(f"unknown op tag {op_tag!r}")
    return fn([_as_value(x) for x in inputs], attrs or {})


# ---------------------------------------------------------------------------
# reverse sweep


def backward(root: Value) -> None:
    """Accumulate d(root)/d(node) into .grad for every reachable node.

    root must be scalar (size-1). Contributions add onto existing grads;
    reset_grad() is the explicit way to clear them between steps.
    """
    if root.data.size != 1:
        raise ShapeMismatchError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return

    # iterative topological order over the differentiable subgraph
    topo: list[Value] = []
    visited = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    root._adj = np.ones_like(root.data)
    for node in reversed(topo):
        adj = node._adj
        if adj is None:
            continue
        node.grad += adj
        if node._backward is not None:
            contribs = node._backward(adj)
            for parent, contrib in zip(node._parents, contribs):
                if not parent.requires_grad or contrib is None:
                    continue
                if parent._adj is None:
                    parent._adj = np.array(contrib, dtype=np.float64)
                else:
                    parent._adj += contrib
        node._adj = None


def reset_grads(values) -> None:
    for v in values:
        v.reset_grad()


def finite_diff_check(fn: Callable[[], Value], params: Sequence[Value], eps: float = 1e-5) -> float:
    """Max relative error between backward() grads and central differences.

    fn rebuilds the loss graph from scratch on every call and must be
    deterministic (fix any RngState inside). Relative error is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.reset_grad()
    out = fn()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("finite_diff_check: non-finite function value")
    backward(out)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn().item()
            flat[i] = orig - eps
            f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            if not np.isfinite(numeric):
                raise FloatingPointError("finite_diff_check: non-finite function value")
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]), abs(numeric))
            worst = max(worst, err)
    return worst
