"""Tape-style reverse-mode autodiff over dense numpy arrays.

A fresh graph is built for every batch. Leaves that should receive gradients
are created with ``requires_grad=True`` (network parameters); everything else
is a constant. Only the handful of ops the feedback networks need are here.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from . import _kernels

_DTYPE = np.float32
_KINK_TRACE: list | None = None  # set by kink_trace(); collects leaky_relu sign masks


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the working dtype (``np.float64`` for gradient checks)."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def kink_trace() -> Iterator[list]:
    """Record the sign pattern at every leaky_relu, so finite-difference
    checks can tell when a perturbation crosses a kink."""
    global _KINK_TRACE
    prev, _KINK_TRACE = _KINK_TRACE, []
    try:
        yield _KINK_TRACE
    finally:
        _KINK_TRACE = prev


class Node:
    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "_backward")

    def __init__(self, value, parents: Sequence["Node"] = (), op: str = "leaf",
                 requires_grad: bool = False):
        self.value = np.asarray(value, dtype=_DTYPE) if op == "leaf" else value
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    def zero_grad(self):
        self.grad = None

    # operator sugar, used sparingly in the model code
    def __add__(self, other):
        return add(self, _as_node(other))

    def __sub__(self, other):
        return sub(self, _as_node(other))

    def __mul__(self, other):
        if isinstance(other, Node):
            raise UsageError("elementwise node*node product is not supported")
        return scale(self, float(other))

    __rmul__ = __mul__


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def tensor(data, requires_grad: bool = False) -> Node:
    return Node(np.array(data, dtype=_DTYPE), requires_grad=requires_grad)


def constant(data) -> Node:
    return Node(np.asarray(data, dtype=_DTYPE))


def detach(x: Node) -> Node:
    return Node(x.value)


def _accumulate(node: Node, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=node.value.dtype, copy=True)
    else:
        node.grad += g


def _make(value, parents, op, backward) -> Node:
    out = Node(value, parents, op)
    if out.requires_grad:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Node, b: Node) -> Node:
    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _make(a.value + b.value, (a, b), "add", backward)


def sub(a: Node, b: Node) -> Node:
    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))
    return _make(a.value - b.value, (a, b), "sub", backward)


def scale(a: Node, c: float) -> Node:
    c = a.value.dtype.type(c)

    def backward(g):
        _accumulate(a, g * c)
    return _make(a.value * c, (a,), "scale", backward)


def leaky_relu(x: Node, slope: float = 0.3) -> Node:
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    slope = x.value.dtype.type(slope)
    xv = np.ascontiguousarray(x.value)
    y = np.empty_like(xv)
    _kernels.leaky_relu_forward(xv.reshape(-1), slope, y.reshape(-1))
    if _KINK_TRACE is not None:
        _KINK_TRACE.append(xv >= 0)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=y.dtype)
        dx = np.empty_like(y)
        _kernels.leaky_relu_backward(y.reshape(-1), g.reshape(-1), slope, dx.reshape(-1))
        _accumulate(x, dx)
    return _make(y, (x,), "leaky_relu", backward)


def sigmoid(x: Node) -> Node:
    # tanh form never overflows, unlike 1/(1+exp(-x))
    half = x.value.dtype.type(0.5)
    y = half * (np.tanh(half * x.value) + 1)

    def backward(g):
        _accumulate(x, g * y * (1 - y))
    return _make(y, (x,), "sigmoid", backward)


def sum(x: Node) -> Node:  # noqa: A001
    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape))
    return _make(np.asarray(x.value.sum(), dtype=x.value.dtype), (x,), "sum", backward)


def mse(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise DimensionError(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    diff = a.value - b.value
    n = diff.size
    value = np.asarray(np.mean(diff * diff), dtype=diff.dtype)

    def backward(g):
        coef = g * (2.0 / n)
        _accumulate(a, coef * diff)
        _accumulate(b, -coef * diff)
    return _make(value, (a, b), "mse", backward)


# ---------------------------------------------------------------- shape ops

def reshape(x: Node, shape) -> Node:
    src = x.shape

    def backward(g):
        _accumulate(x, g.reshape(src))
    return _make(x.value.reshape(shape), (x,), "reshape", backward)


def concat(xs: Sequence[Node], axis: int = 1) -> Node:
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            _accumulate(x, part)
    return _make(np.concatenate([x.value for x in xs], axis=axis), tuple(xs), "concat", backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.value.T)
        if b.requires_grad:
            _accumulate(b, a.value.T @ g)
    return _make(a.value @ b.value, (a, b), "matmul", backward)


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    if x.value.ndim != 2 or weight.value.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    y = x.value @ weight.value.T
    if bias is not None:
        y = y + bias.value

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.value)
        if weight.requires_grad:
            _accumulate(weight, g.T @ x.value)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, "linear", backward)


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return np.ascontiguousarray(x)
    N, C, H, W = x.shape
    xp = np.zeros((N, C, H + 2 * ph, W + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + H, pw:pw + W] = x
    return xp


def conv2d(x: Node, w: Node, bias: Node | None = None) -> Node:
    """Zero same-padded cross-correlation, stride 1.

    ``x`` is [N, C, H, W] (an unbatched [C, H, W] input is accepted and the
    output keeps that rank); ``w`` is [O, C, kh, kw] with odd kernel dims.
    """
    if w.value.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-d, got shape {w.shape}")
    O, C, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d needs odd kernel dims for same padding, got {kh}x{kw}")
    unbatched = x.value.ndim == 3
    xv = x.value[None] if unbatched else x.value
    if xv.ndim != 4 or xv.shape[1] != C:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not match {O} output channels")
    N, _, H, W = xv.shape
    ph, pw = kh // 2, kw // 2
    dtype = xv.dtype
    xp = _pad(xv, ph, pw)
    wv = np.ascontiguousarray(w.value, dtype=dtype)
    out = np.zeros((N, O, H, W), dtype=dtype)
    _kernels.conv_forward(xp, wv, out)
    if bias is not None:
        out += bias.value[None, :, None, None]

    def backward(g):
        g4 = np.ascontiguousarray(g[None] if unbatched else g)
        if x.requires_grad:
            flipped = np.ascontiguousarray(wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dx = np.zeros((N, C, H, W), dtype=dtype)
            _kernels.conv_forward(_pad(g4, ph, pw), flipped, dx)
            _accumulate(x, dx[0] if unbatched else dx)
        if w.requires_grad:
            dw = np.zeros_like(wv)
            _kernels.conv_weight_grad(xp, g4, dw)
            _accumulate(w, dw)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g4.sum(axis=(0, 2, 3)))
    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out[0] if unbatched else out, parents, "conv2d", backward)


# ---------------------------------------------------------------- binarization

def binarize_forward(latent: np.ndarray) -> np.ndarray:
    """``mean(|latent|) * sign(latent)`` with sign(0) taken as +1."""
    latent = np.asarray(latent)
    if latent.size == 0:
        raise UsageError("cannot binarize an empty tensor")
    s = np.mean(np.abs(latent))
    return np.where(latent >= 0, s, -s).astype(latent.dtype)


def binarize_backward(upstream: np.ndarray, latent: np.ndarray) -> np.ndarray:
    """Hard-tanh straight-through estimator; the scale is treated as a constant."""
    if upstream.shape != latent.shape:
        raise DimensionError(f"STE shapes differ: {upstream.shape} vs {latent.shape}")
    return np.where(np.abs(latent) <= 1, upstream, 0).astype(upstream.dtype)


def binarize(latent: Node) -> Node:
    def backward(g):
        _accumulate(latent, binarize_backward(g, latent.value))
    return _make(binarize_forward(latent.value), (latent,), "binarize", backward)


# ---------------------------------------------------------------- backward pass

def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
