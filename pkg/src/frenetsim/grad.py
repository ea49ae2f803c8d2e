"""Reverse-mode automatic differentiation over dense float64 tensors.

A ``Tensor`` wraps a numpy array and remembers the op that produced it,
so the computation graph doubles as the tape: walking it in reverse
topological order from a scalar root yields exact gradients for every
leaf. All arithmetic is float64 and single-threaded numpy, which makes
backward passes bit-deterministic for identical graphs.

Subgradient conventions: relu'(0) = 0; binary minimum/maximum route the
gradient to the first argument on ties; min/max reductions route to the
first flat index among ties.
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    """Build an output node; record parents only when grads are wanted."""
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum gradient over axes that numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{opname}: incompatible shapes {a.data.shape} and {b.data.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def backward(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out_data = a.data / b.data

    def backward(g):
        a.accumulate(_unbroadcast(g / b.data, a.data.shape))
        b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def minimum(a, b):
    """Elementwise min; ties send the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "minimum")
    out_data = np.minimum(a.data, b.data)
    mask = (a.data <= b.data).astype(np.float64)
    mask = np.broadcast_to(mask, out_data.shape)

    def backward(g):
        a.accumulate(_unbroadcast(g * mask, a.data.shape))
        b.accumulate(_unbroadcast(g * (1.0 - mask), b.data.shape))

    return _make(out_data, (a, b), backward)


def maximum(a, b):
    """Elementwise max; ties send the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    out_data = np.maximum(a.data, b.data)
    mask = (a.data >= b.data).astype(np.float64)
    mask = np.broadcast_to(mask, out_data.shape)

    def backward(g):
        a.accumulate(_unbroadcast(g * mask, a.data.shape))
        b.accumulate(_unbroadcast(g * (1.0 - mask), b.data.shape))

    return _make(out_data, (a, b), backward)


def atan2(y, x):
    y, x = as_tensor(y), as_tensor(x)
    _check_broadcast(y, x, "atan2")
    out_data = np.arctan2(y.data, x.data)
    denom = y.data * y.data + x.data * x.data

    def backward(g):
        y.accumulate(_unbroadcast(g * x.data / denom, y.data.shape))
        x.accumulate(_unbroadcast(-g * y.data / denom, x.data.shape))

    return _make(out_data, (y, x), backward)


# ---------------------------------------------------------------------------
# elementwise unary ops


def neg(a):
    a = as_tensor(a)

    def backward(g):
        a.accumulate(-g)

    return _make(-a.data, (a,), backward)


def absval(a):
    a = as_tensor(a)
    sign = np.sign(a.data)  # sign(0) = 0 fixes the subgradient at the kink

    def backward(g):
        a.accumulate(g * sign)

    return _make(np.abs(a.data), (a,), backward)


def relu(a):
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)

    def backward(g):
        a.accumulate(g * mask)

    return _make(a.data * mask, (a,), backward)


def square(a):
    a = as_tensor(a)

    def backward(g):
        a.accumulate(g * 2.0 * a.data)

    return _make(a.data * a.data, (a,), backward)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a.accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a.accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a):
    a = as_tensor(a)

    def backward(g):
        a.accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sin(a):
    a = as_tensor(a)

    def backward(g):
        a.accumulate(g * np.cos(a.data))

    return _make(np.sin(a.data), (a,), backward)


def cos(a):
    a = as_tensor(a)

    def backward(g):
        a.accumulate(-g * np.sin(a.data))

    return _make(np.cos(a.data), (a,), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape

    def backward(g):
        a.accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def backward(g):
        a.accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)

    def backward(g):
        a.accumulate(g.swapaxes(ax1, ax2))

    return _make(a.data.swapaxes(ax1, ax2), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t.accumulate(g[tuple(idx)])

    return _make(out_data, tuple(tensors), backward)


def tslice(a, start, stop, axis=0):
    """Contiguous slice along one axis; backward pads with zeros."""
    a = as_tensor(a)
    n = a.data.shape[axis]
    start, stop, _ = slice(start, stop).indices(n)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        a.accumulate(buf)

    return _make(a.data[idx], (a,), backward)


def gather(a, indices, axis=0):
    """Take rows along ``axis`` by integer index; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out_data = np.take(a.data, idx, axis=axis)

    def backward(g):
        buf = np.zeros_like(a.data)
        moved = np.moveaxis(buf, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        a.accumulate(buf)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    axes = _axis_tuple(axis, a.data.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        a.accumulate(np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    axes = _axis_tuple(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        a.accumulate(np.broadcast_to(g, a.data.shape) / count)

    return _make(out_data, (a,), backward)


def _reduce_extreme(a, axis, keepdims, kind):
    a = as_tensor(a)
    fn = np.min if kind == "min" else np.max
    arg = np.argmin if kind == "min" else np.argmax
    out_data = fn(a.data, axis=axis, keepdims=keepdims)

    if axis is None:
        flat_idx = arg(a.data)  # first flat index on ties

        def backward(g):
            buf = np.zeros_like(a.data)
            buf.flat[flat_idx] = np.asarray(g).reshape(())
            a.accumulate(buf)

    else:
        ax = axis % a.data.ndim
        sel = arg(a.data, axis=ax)  # first index along axis on ties

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, ax)
            buf = np.zeros_like(a.data)
            np.put_along_axis(buf, np.expand_dims(sel, ax), g, axis=ax)
            a.accumulate(buf)

    return _make(out_data, (a,), backward)


def tmin(a, axis=None, keepdims=False):
    return _reduce_extreme(a, axis, keepdims, "min")


def tmax(a, axis=None, keepdims=False):
    return _reduce_extreme(a, axis, keepdims, "max")


# ---------------------------------------------------------------------------
# linear algebra and nn ops


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} vs {b.data.shape}")
    try:
        out_data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch dims, {a.data.shape} vs {b.data.shape}") from None

    def backward(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        a.accumulate(_unbroadcast(ga, a.data.shape))
        b.accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a.accumulate(out_data * (g - dot))

    return _make(out_data, (a,), backward)


def layernorm(x, gamma, beta, eps=1e-6):
    """Normalize over the last axis; composed from primitives."""
    x = as_tensor(x)
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(square(centered), axis=-1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    return add(mul(mul(centered, inv), gamma), beta)


def clamp(a, lo, hi):
    return minimum(maximum(a, lo), hi)


# ---------------------------------------------------------------------------
# backward


def topo_order(root: Tensor):
    """The tape: every reachable node, inputs before consumers."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        # reversed so parents are visited in declaration order
        for p in reversed(node._parents):
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Tensor):
    """Accumulate gradients of a scalar root into every node's .grad."""
    if root.data.shape != ():
        raise ShapeError(f"backward: root must be scalar, got shape {root.data.shape}")
    order = topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
