"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Complex images are carried as a leading axis of two real channels, so the
real part of a complex inner product is the plain dot product over both
channels.

Every primitive takes :class:`Var` (or plain arrays/floats, which become
constants) and returns a new :class:`Var`. A node only records its parents
and backward rule when at least one input requires a gradient, so evaluating
an expression on constants costs no more than the underlying numpy work.
"""
from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible operand shapes."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class Var:
    """A node in the computation graph.

    Parameters
    ----------
    value : array_like
        Forward value; stored as a float64 ndarray.
    requires_grad : bool
        Mark a leaf whose cotangent should be accumulated.
    """

    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "op")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)) or (isinstance(other, Var) and other.value.ndim == 0):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)


def as_var(x):
    return x if isinstance(x, Var) else Var(x)


def leaf(value):
    """Create a leaf that requires a gradient."""
    return Var(np.array(value, dtype=np.float64), requires_grad=True)


def _make(value, parents, backward_fn, op):
    if any(p.requires_grad for p in parents):
        return Var(value, True, parents, backward_fn, op)
    return Var(value, op=op)


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------- primitives

def add(a, b):
    a, b = as_var(a), as_var(b)
    _check_same("add", a, b)
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_var(a), as_var(b)
    _check_same("sub", a, b)
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def scale(x, c):
    """Multiply ``x`` by a scalar: a Python float or a 0-d :class:`Var`."""
    x = as_var(x)
    if isinstance(c, Var):
        if c.value.ndim != 0:
            raise ShapeError("scale", x.shape, c.shape)
        cv = float(c.value)
        return _make(x.value * cv, (x, c),
                     lambda g: (g * cv, np.array(np.vdot(g, x.value))), "scale")
    c = float(c)
    return _make(x.value * c, (x,), lambda g: (g * c,), "scale")


def mul(a, b):
    a, b = as_var(a), as_var(b)
    _check_same("mul", a, b)
    return _make(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value), "mul")


def div(a, b):
    """Scalar division ``a / b`` of two 0-d nodes."""
    a, b = as_var(a), as_var(b)
    if a.value.ndim or b.value.ndim:
        raise ShapeError("div", a.shape, b.shape)
    av, bv = float(a.value), float(b.value)
    return _make(np.array(av / bv), (a, b),
                 lambda g: (g / bv, -g * av / (bv * bv)), "div")


def sqrt(x):
    x = as_var(x)
    r = np.sqrt(x.value)
    return _make(r, (x,), lambda g: (g * 0.5 / r,), "sqrt")


def square(x):
    x = as_var(x)
    return _make(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,), "square")


def relu(x):
    x = as_var(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x):
    x = as_var(x)
    t = np.tanh(x.value)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def total(x):
    """Sum of all entries, as a 0-d node."""
    x = as_var(x)
    shape = x.shape
    return _make(np.array(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def inner(a, b):
    """Real dot product over all entries (Re<a, b> for channel-paired complex)."""
    a, b = as_var(a), as_var(b)
    _check_same("inner", a, b)
    return _make(np.array(np.vdot(a.value, b.value)), (a, b),
                 lambda g: (g * b.value, g * a.value), "inner")


def norm2(x):
    """Euclidean norm over all entries; the gradient at 0 is taken as 0."""
    x = as_var(x)
    n = float(np.sqrt(np.vdot(x.value, x.value)))

    def back(g):
        if n == 0.0:
            return (np.zeros_like(x.value),)
        return (g * x.value / n,)

    return _make(np.array(n), (x,), back, "norm2")


def sumsq(x):
    x = as_var(x)
    return _make(np.array(np.vdot(x.value, x.value)), (x,), lambda g: (2.0 * g * x.value,), "sumsq")


def conv2d(x, w, bias):
    """Circular 'same' cross-correlation.

    out[o, i, j] = bias[o] + sum_{c,a,b} w[o, c, a, b] * x[c, i + a - p, j + b - p]
    with indices taken modulo the image size and ``p = k // 2``.
    """
    x, w, bias = as_var(x), as_var(w), as_var(bias)
    if x.value.ndim != 3 or w.value.ndim != 4:
        raise ShapeError("conv2d", x.shape, w.shape)
    cout, cin, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d", x.shape, w.shape)
    if cin != x.shape[0]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if bias.shape != (cout,):
        raise ShapeError("conv2d", w.shape, bias.shape)
    out = kernels.conv2d_forward(x.value, w.value, bias.value)

    def back(g):
        gx = kernels.conv2d_grad_input(g, w.value) if x.requires_grad else None
        gw = kernels.conv2d_grad_weight(g, x.value, kh) if w.requires_grad else None
        gb = g.sum(axis=(1, 2)) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, w, bias), back, "conv2d")


def linear_map(x, forward, adjoint=None, name="linear"):
    """Apply a fixed linear map given as a numpy callable.

    ``adjoint`` defaults to ``forward`` (self-adjoint maps such as A^H A).
    """
    x = as_var(x)
    adj = forward if adjoint is None else adjoint
    return _make(np.asarray(forward(x.value), dtype=np.float64), (x,),
                 lambda g: (np.asarray(adj(g), dtype=np.float64),), name)


def custom(value, parents, backward_fn, name):
    """Register an externally computed node with its own backward rule."""
    parents = tuple(as_var(p) for p in parents)
    return _make(np.asarray(value, dtype=np.float64), parents, backward_fn, name)


# ---------------------------------------------------------------- backward

def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root, seed, leaves):
    """Propagate cotangent ``seed`` from ``root`` and return cotangents of ``leaves``."""
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != root.shape:
        raise ShapeError("backward", root.shape, seed.shape)
    grads = {id(root): seed}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None or node.backward_fn is None:
            if g is not None:
                grads[id(node)] = g
            continue
        for p, gp in zip(node.parents, node.backward_fn(g)):
            if gp is None or not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=np.float64)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp
    return [grads.get(id(lf), np.zeros(lf.shape)) for lf in leaves]


def grad(root, leaves):
    """Gradient of a scalar node with respect to each leaf.

    Leaves that do not influence ``root`` get a zero cotangent.
    """
    if root.value.ndim != 0:
        raise ValueError(f"grad: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return [np.zeros(lf.shape) for lf in leaves]
    return backward(root, np.array(1.0), leaves)


def vjp(fn, x, v):
    """Return v^T (d fn / d x), shaped like ``x``."""
    xl = leaf(x)
    y = fn(xl)
    v = np.asarray(v, dtype=np.float64)
    if y.shape != v.shape:
        raise ShapeError("vjp", y.shape, v.shape)
    if not y.requires_grad:
        return np.zeros(xl.shape)
    return backward(y, v, [xl])[0]
