"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough tape machinery for the denoising network: elementwise math,
matmul with broadcasting, 2-D convolution, softmax, reductions, reshapes,
embedding lookup. Every op registers a closure that maps the output gradient
to parent gradients; ``backward()`` walks the tape in reverse topological
order. ``no_grad()`` disables tape construction for inference loops.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """An ndarray plus the closure that backpropagates through it."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._backward = None
        self._parents = ()

    # -- graph ------------------------------------------------------------

    def backward(self, seed=None):
        """Accumulate gradients of this (scalar) value into the tape leaves."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed needs a scalar output")
            seed = np.ones_like(self.data)
        order = []
        visited = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = seed
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- conveniences -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) != 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _accumulate(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast up from ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        return _make(a.data + b, (a,), lambda g: _accumulate(a, g))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        return add(a, -b)
    if not isinstance(a, Tensor) and np.isscalar(a):
        a_s = a
        b = as_tensor(b)
        return _make(a_s - b.data, (b,), lambda g: _accumulate(b, -g))
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        return _make(a.data * b, (a,), lambda g: _accumulate(a, g * b))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * out_data / b.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def pow_scalar(a, k):
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g * (k * a.data ** (k - 1)))

    return _make(a.data ** k, (a,), backward)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * (0.5 / out_data))

    return _make(out_data, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward)


def silu(a):
    a = as_tensor(a)
    # stable logistic: exponentiate only non-positive values
    pos = a.data >= 0
    z = np.exp(np.where(pos, -a.data, a.data))
    sig = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)).astype(a.data.dtype)

    def backward(g):
        _accumulate(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(a.data * sig, (a,), backward)


# ---------------------------------------------------------------------------
# Reductions, shape ops
# ---------------------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims, dtype=a.data.dtype)

    def backward(g):
        gg = np.asarray(g)
        if not keepdims and axis is not None:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % a.data.ndim for ax in axes)
            shape = [1 if i in axes else s for i, s in enumerate(a.data.shape)]
            gg = gg.reshape(shape)
        _accumulate(a, np.broadcast_to(gg, a.data.shape))

    return _make(out_data, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward)


def take_slice(a, key):
    """Basic (slice/int) indexing; gradient scatters back into place."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accumulate(a, full)

    return _make(a.data[key], (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(index)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward)


# ---------------------------------------------------------------------------
# Linear algebra and attention pieces
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 or b.ndim == 1:
        # promote vectors to matrices so the gradient rule below applies,
        # then drop the unit axes again
        a2 = reshape(a, (1,) + a.shape) if a.ndim == 1 else a
        b2 = reshape(b, b.shape + (1,)) if b.ndim == 1 else b
        out = matmul(a2, b2)
        if a.ndim == 1:
            out = reshape(out, out.shape[:-2] + out.shape[-1:])
        if b.ndim == 1:
            out = reshape(out, out.shape[:-1])
        return out

    def backward(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(a.data @ b.data, (a, b), backward)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        _accumulate(a, p * (g - inner))

    return _make(p, (a,), backward)


def embedding(table, indices):
    """Row lookup ``table[indices]`` with scatter-add gradient."""
    table = as_tensor(table)
    indices = np.asarray(indices)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices, g)
        _accumulate(table, full)

    return _make(table.data[indices], (table,), backward)


# ---------------------------------------------------------------------------
# Convolution and resampling
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution on (N, Cin, H, W) with an (Cout, Cin, kh, kw) kernel."""
    x = as_tensor(x)
    w = as_tensor(w)
    n, cin, h_in, w_in = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_data = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3]))
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))
    h_out, w_out = out_data.shape[2], out_data.shape[3]
    if b is not None:
        b = as_tensor(b)
        out_data = out_data + b.data[None, :, None, None]
        parents = (x, w, b)
    else:
        parents = (x, w)

    def backward(g):
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
            _accumulate(w, gw)
        if x.requires_grad:
            # (N, Cout, Ho, Wo) x (Cout, Cin, kh, kw) -> (N, Ho, Wo, Cin, kh, kw)
            gcol = np.tensordot(g, w.data, axes=([1], [0]))
            gxp = np.zeros_like(xp)
            for a_off in range(kh):
                for b_off in range(kw):
                    gxp[:, :,
                        a_off : a_off + h_out * stride : stride,
                        b_off : b_off + w_out * stride : stride] += \
                        gcol[:, :, :, :, a_off, b_off].transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding : padding + h_in, padding : padding + w_in]
            _accumulate(x, gxp)

    return _make(out_data, parents, backward)


def upsample_nearest2x(x):
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        _accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# Numerical differentiation (test oracle)
# ---------------------------------------------------------------------------

def finite_difference(f, x, indices, eps=1e-5):
    """Central-difference derivative of scalar ``f`` at entries of array ``x``.

    ``f`` is called with no arguments and must read ``x`` afresh each call;
    ``indices`` is an iterable of flat indices into ``x``. Mutates and
    restores ``x`` in place.
    """
    flat = x.reshape(-1)
    grads = np.empty(len(indices), dtype=np.float64)
    for row, idx in enumerate(indices):
        orig = flat[idx]
        flat[idx] = orig + eps
        f_plus = float(f())
        flat[idx] = orig - eps
        f_minus = float(f())
        flat[idx] = orig
        grads[row] = (f_plus - f_minus) / (2.0 * eps)
    return grads
