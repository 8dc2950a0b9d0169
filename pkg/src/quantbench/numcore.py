"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A ``Tensor`` here is simply a float64 :class:`numpy.ndarray`.  Graph nodes wrap
a tensor value and remember how to push gradients back to their parents.
The graph is rebuilt on every forward pass; :func:`backward` walks it in
reverse topological order.

Broadcasting is deliberately narrow: operands must share a shape, or one of
them is a scalar, or one of them is a per-channel vector (same rank, exactly
one non-unit axis matching the other operand).  Anything else raises
:class:`~quantbench.errors.DimensionError`.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, InvalidRangeError

Tensor = np.ndarray

_grad_enabled = True
_rounding_identity = False
_ids = itertools.count()


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


@contextmanager
def no_grad():
    """Evaluate without recording backward closures."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def rounding_as_identity():
    """Make every straight-through op an exact identity in the forward pass.

    Used by gradient oracles: with rounding removed the composed function is
    smooth, so central differences can check the backward rules around it.
    """
    global _rounding_identity
    prev = _rounding_identity
    _rounding_identity = True
    try:
        yield
    finally:
        _rounding_identity = prev


class Node:
    __slots__ = ("id", "op", "value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, op: str = "const", requires_grad: bool = False):
        self.id = next(_ids)
        self.op = op
        self.value = as_tensor(value)
        self.grad: Tensor | None = None
        self.parents: tuple[Node, ...] = ()
        self.backward_fn: Callable | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"

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

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Node):
    """A trainable leaf with a unique dotted name such as ``"fc1.weight"``."""

    __slots__ = ("name",)

    def __init__(self, value, name: str, requires_grad: bool = True):
        super().__init__(np.array(value, dtype=np.float64), op="param", requires_grad=requires_grad)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"

    def zero_grad(self):
        self.grad = None


def const(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def detach(x: Node) -> Node:
    return Node(const(x).value)


def _make(value, parents: Sequence[Node], op: str, backward_fn: Callable) -> Node:
    out = Node(value, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    sa, sb = math.prod(a), math.prod(b)
    if (sa == 1 and len(a) <= len(b)) or (sb == 1 and len(b) <= len(a)):
        return
    if len(a) == len(b):
        for small, big in ((a, b), (b, a)):
            wide = [i for i, d in enumerate(small) if d != 1]
            if len(wide) == 1 and small[wide[0]] == big[wide[0]]:
                return
    raise DimensionError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, op: str):
    a, b = const(a), const(b)
    _check_broadcast(a.shape, b.shape, op)
    return a, b


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Node:
    a, b = _binary(a, b, "add")
    return _make(a.value + b.value, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = _binary(a, b, "sub")
    return _make(a.value - b.value, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    a, b = _binary(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Node:
    a, b = _binary(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)))


def neg(a) -> Node:
    a = const(a)
    return _make(-a.value, (a,), "neg", lambda g: (-g,))


def square(a) -> Node:
    a = const(a)
    av = a.value
    return _make(av * av, (a,), "square", lambda g: (2.0 * av * g,))


def exp(a) -> Node:
    a = const(a)
    out = np.exp(a.value)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Node:
    a = const(a)
    av = a.value
    if np.any(av <= 0):
        raise ContractError("log: input must be strictly positive")
    return _make(np.log(av), (a,), "log", lambda g: (g / av,))


def relu(a) -> Node:
    a = const(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), "relu", lambda g: (g * mask,))


def pow2(a) -> Node:
    """Elementwise ``2**a``."""
    a = const(a)
    out = np.exp2(a.value)
    return _make(out, (a,), "pow2", lambda g: (g * out * math.log(2.0),))


def round_half_away(x) -> Tensor:
    x = as_tensor(x)
    t = np.trunc(x)
    return t + np.where(np.abs(x - t) >= 0.5, np.sign(x), 0.0)


def ste(a, fn: Callable[[Tensor], Tensor], op: str = "ste") -> Node:
    """Apply ``fn`` in the forward pass and the identity Jacobian backward."""
    a = const(a)
    value = a.value.copy() if _rounding_identity else as_tensor(fn(a.value))
    return _make(value, (a,), op, lambda g: (g,))


def round_ste(a) -> Node:
    return ste(a, round_half_away, "round_ste")


def floor_ste(a) -> Node:
    return ste(a, np.floor, "floor_ste")


def clamp(x, lo, hi) -> Node:
    x, lo, hi = const(x), const(lo), const(hi)
    _check_broadcast(x.shape, lo.shape, "clamp")
    _check_broadcast(x.shape, hi.shape, "clamp")
    if np.any(lo.value > hi.value):
        raise InvalidRangeError(f"clamp: lower bound exceeds upper bound ({lo.value} > {hi.value})")
    xv = x.value
    below = xv < lo.value
    above = xv > hi.value
    inside = ~(below | above)
    out = np.minimum(np.maximum(xv, lo.value), hi.value)
    return _make(out, (x, lo, hi), "clamp",
                 lambda g: (g * inside, _unbroadcast(g * below, lo.shape), _unbroadcast(g * above, hi.shape)))


# -- shape and reductions ---------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False) -> Node:
    a = const(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axes, keepdims=keepdims), (a,), "sum", back)


def mean(a, axis=None, keepdims=False) -> Node:
    a = const(a)
    axes = _norm_axis(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes) if axes else 1
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Node:
    a = const(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a) -> Node:
    a = const(a)
    return _make(a.value.T, (a,), "transpose", lambda g: (g.T,))


def stack(nodes: Iterable) -> Node:
    """Stack scalar (or same-shape) nodes along a new leading axis."""
    nodes = [const(n) for n in nodes]
    value = np.stack([n.value for n in nodes])
    return _make(value, nodes, "stack", lambda g: tuple(g[i] for i in range(len(nodes))))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = const(a), const(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), "matmul", lambda g: (g @ bv.T, av.T @ g))


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Node:
    """Cross-correlation of ``x[n,c,h,w]`` with ``w[o,c,kh,kw]`` (zero padding)."""
    x, w = const(x), const(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(f"conv2d: input has {c} channels but weight expects {cw} ({x.shape} vs {w.shape})")
    if stride < 1:
        raise ContractError("conv2d: stride must be >= 1")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd} (padding {padding})")
    s, p = stride, padding
    xp = np.pad(x.value, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.value
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2], win.shape[3]
    wv = w.value
    out = np.tensordot(win, wv, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def back(g):
        dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        dwin = np.tensordot(g, wv, axes=([1], [0]))  # n, ho, wo, c, kh, kw
        dxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        return dx, dw

    return _make(np.ascontiguousarray(out), (x, w), "conv2d", back)


# -- probabilities ----------------------------------------------------------

def softmax(a, axis: int = -1) -> Node:
    a = const(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (a,), "softmax",
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def cross_entropy(logits, labels) -> Node:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = const(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = float(np.mean(lse - z[rows, labels]))

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return _make(np.array(nll), (logits,), "cross_entropy", back)


# -- backward ---------------------------------------------------------------

def _topo(root: Node) -> list[Node]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node that needs it."""
    if loss.value.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {loss.id: np.ones_like(loss.value)}
    for node in reversed(_topo(loss)):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else prev + pg


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None
