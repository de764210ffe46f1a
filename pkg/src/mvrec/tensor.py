"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a fresh node recording its parents and a closure that
pushes the output gradient back to them. ``backward`` walks the graph once
in reverse topological order and then releases it.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested op."""


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
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference only)."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def _node(data, parents, fn):
    req = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=fn)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss):
    """Populate ``grad`` on every leaf that requires it, then free the graph."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
            node._backward = None
            node._parents = ()
            node.grad = None


# ---------------------------------------------------------------- creation

def tensor_new(shape, init="zeros", *, value=0.0, rng=None, lo=0.0, hi=1.0,
               fan_in=None, fan_out=None, requires_grad=False):
    """Allocate a tensor with one of the supported initialisers.

    ``init`` is one of ``zeros``, ``constant``, ``uniform`` or ``glorot``.
    Glorot draws from U(-r, r) with ``r = sqrt(6 / (fan_in + fan_out))``.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    if init == "zeros":
        data = np.zeros(shape)
    elif init == "constant":
        data = np.full(shape, float(value))
    elif init == "uniform":
        data = rng.uniform(lo, hi, size=shape)
    elif init == "glorot":
        if fan_in is None or fan_out is None:
            raise ValueError("glorot init needs fan_in and fan_out")
        r = math.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-r, r, size=shape)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------- elementwise

def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)
    return _node(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)
    return _node(a.data - b.data, (a, b), bw)


def mul(a, b):
    """Hadamard product."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _node(a.data * b.data, (a, b), bw)


def scale(a, c):
    c = float(c)

    def bw(g):
        _accum(a, g * c)
    return _node(a.data * c, (a,), bw)


def tanh(a):
    out = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out * out))
    return _node(out, (a,), bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)
    return _node(np.maximum(a.data, 0.0), (a,), bw)  # NaN propagates


def elementwise(op, *operands):
    ops = {"add": add, "mul": mul, "tanh": tanh, "relu": relu}
    if op not in ops:
        raise ValueError(f"unknown elementwise op {op!r}")
    return ops[op](*operands)


# ---------------------------------------------------------------- linear algebra

def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents {a.shape} x {b.shape} differ")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
    return _node(a.data @ b.data, (a, b), bw)


def linear(x, W, b=None):
    """``x @ W + b`` with ``x`` [..., in], ``W`` [in, out], ``b`` [out]."""
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {W.shape}")
    out = x.data @ W.data
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ W.data.T)
        if W.requires_grad:
            _accum(W, x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        if b is not None and b.requires_grad:
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
    return _node(out, parents, bw)


def transpose(a):
    def bw(g):
        _accum(a, np.swapaxes(g, -1, -2))
    return _node(np.swapaxes(a.data, -1, -2), (a,), bw)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape):
    src = a.shape

    def bw(g):
        _accum(a, g.reshape(src))
    return _node(a.data.reshape(shape), (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one operand")
    if len(tensors) == 1:
        return tensors[0]
    nd = tensors[0].data.ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.data.ndim != nd or any(
                t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: {t.shape} incompatible with {tensors[0].shape} on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=ax)):
            _accum(t, part)
    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack: {t.shape} vs {tensors[0].shape}")

    def bw(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis))
    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def select(a, index, axis):
    """Take a single index along ``axis`` (the axis is dropped)."""
    def bw(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        _accum(a, full)
    return _node(np.take(a.data, index, axis=axis), (a,), bw)


def embedding(table, idx):
    """Gather rows of ``table`` [n, e]; negative indices yield zero rows."""
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    out = table.data[safe] * valid[..., None]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, safe[valid], g[valid])
        _accum(table, gt)
    return _node(out, (table,), bw)


# ---------------------------------------------------------------- reductions

def sum_all(a):
    def bw(g):
        _accum(a, np.broadcast_to(g, a.shape))
    return _node(np.array(a.data.sum()), (a,), bw)


def mean_axis(a, axis):
    n = a.shape[axis]

    def bw(g):
        _accum(a, np.broadcast_to(np.expand_dims(g, axis) / n, a.shape))
    return _node(a.data.mean(axis=axis), (a,), bw)


def softmax(x, axis=-1):
    """Max-shifted softmax along ``axis``."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))
    return _node(s, (x,), bw)


def log_softmax_np(z, axis=-1):
    m = z.max(axis=axis, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


def cross_entropy(logits, target):
    """Softmax cross-entropy; mean over the batch when ``logits`` is [B, n].

    ``target`` is an index (for [n] logits) or an index array of length B.
    """
    single = logits.data.ndim == 1
    z = logits.data[None, :] if single else logits.data
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n = z.shape[1]
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"cross_entropy: {t.shape[0]} targets for {z.shape[0]} rows")
    if np.any(t < 0) or np.any(t >= n):
        raise IndexError(f"target out of range [0, {n})")
    ls = log_softmax_np(z, axis=1)
    rows = np.arange(z.shape[0])
    loss = -ls[rows, t].mean()

    def bw(g):
        p = np.exp(ls)
        p[rows, t] -= 1.0
        p *= g / z.shape[0]
        _accum(logits, p[0] if single else p)
    return _node(np.array(loss), (logits,), bw)


# ---------------------------------------------------------------- 3-D conv / pool

def _triple(v):
    if isinstance(v, (tuple, list)):
        return tuple(int(i) for i in v)
    return (int(v),) * 3


def conv_out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv3d(x, kernels_, bias=None, stride=1, padding=0):
    """Valid cross-correlation of ``x`` [C, D, H, W] or [B, C, D, H, W]
    with ``kernels_`` [C_out, C_in, kd, kh, kw]."""
    single = x.data.ndim == 4
    xd = x.data[None] if single else x.data
    co, ci, kd, kh, kw = kernels_.shape
    if xd.shape[1] != ci:
        raise ShapeError(f"conv3d: input has {xd.shape[1]} channels, kernels expect {ci}")
    st, pd = _triple(stride), _triple(padding)
    if any(p > 0 for p in pd):
        xp = np.pad(xd, ((0, 0), (0, 0)) + tuple((p, p) for p in pd))
    else:
        xp = np.ascontiguousarray(xd)
    if any(xp.shape[2 + i] < k for i, k in enumerate((kd, kh, kw))):
        raise ShapeError(f"conv3d: kernel {(kd, kh, kw)} exceeds padded input {xp.shape[2:]}")
    cols = kernels.im2col3d(xp, kd, kh, kw, *st)
    wmat = kernels_.data.reshape(co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))
    parents = (x, kernels_) if bias is None else (x, kernels_, bias)

    def bw(g):
        gb = g if not single else g[None]
        gt = gb.transpose(0, 2, 3, 4, 1)
        if kernels_.requires_grad:
            _accum(kernels_, (gt.reshape(-1, co).T @ cols.reshape(-1, cols.shape[-1]))
                   .reshape(kernels_.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, gt.reshape(-1, co).sum(axis=0))
        if x.requires_grad:
            gcols = np.ascontiguousarray(gt @ wmat)
            gx = kernels.col2im3d(gcols, ci, *xp.shape[2:], kd, kh, kw, *st)
            if any(p > 0 for p in pd):
                gx = gx[:, :, pd[0]:gx.shape[2] - pd[0], pd[1]:gx.shape[3] - pd[1],
                        pd[2]:gx.shape[4] - pd[2]]
            _accum(x, gx[0] if single else gx)
    return _node(out[0] if single else out, parents, bw)


def maxpool3d(x, window, stride=None):
    """Windowed max; ties route the gradient to the first row-major index."""
    single = x.data.ndim == 4
    xd = np.ascontiguousarray(x.data[None] if single else x.data)
    win = _triple(window)
    st = win if stride is None else _triple(stride)
    d, h, w = xd.shape[2:]
    if any(n < k for n, k in zip((d, h, w), win)):
        raise ShapeError(f"maxpool3d: window {win} exceeds input {(d, h, w)}")
    out, arg = kernels.maxpool3d_forward(xd, *win, *st)

    def bw(g):
        gb = np.ascontiguousarray(g[None] if single else g)
        gx = kernels.maxpool3d_backward(gb, arg, d, h, w)
        _accum(x, gx[0] if single else gx)
    return _node(out[0] if single else out, (x,), bw)
