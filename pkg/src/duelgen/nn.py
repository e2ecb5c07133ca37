"""Parameter containers and the layers the denoiser is assembled from.

Modules hold named Parameters; `named_parameters()` walks the attribute tree
so checkpoint blobs and freeze policies can address every tensor by a stable
dotted path. Layers draw their initial weights from an explicit Generator so
construction is reproducible.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, ShapeError


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data):
        super().__init__(np.asarray(data), requires_grad=True)
        # parameters stay grad-capable even when constructed under no_grad()
        self.requires_grad = True


class Module:
    """Base class; submodules and parameters are discovered via attributes."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, ModuleList):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_dict(self):
        return dict(self.named_parameters())

    def n_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class ModuleList(list):
    """A plain list of Modules that named_parameters() knows how to walk."""


def _normal(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype=np.float32, bias=True, zero_init=False):
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            w = _normal(rng, (d_in, d_out), 1.0 / math.sqrt(d_in), dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x):
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = ad.add(out, self.bias)
        return out


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=None,
                 dtype=np.float32, zero_init=False):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = c_in * kernel * kernel
        if zero_init:
            w = np.zeros((c_out, c_in, kernel, kernel), dtype=dtype)
        else:
            w = _normal(rng, (c_out, c_in, kernel, kernel),
                        math.sqrt(2.0 / fan_in), dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias,
                         stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, groups, channels, dtype=np.float32, eps=1e-5):
        if channels % groups:
            raise ParameterError(f"channels {channels} not divisible by groups {groups}")
        self.groups = groups
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))

    def __call__(self, x):
        n, c, h, w = x.shape
        g = self.groups
        grouped = ad.reshape(x, (n, g, (c // g) * h * w))
        mu = ad.reduce_mean(grouped, axis=2, keepdims=True)
        centered = ad.sub(grouped, mu)
        var = ad.reduce_mean(ad.mul(centered, centered), axis=2, keepdims=True)
        inv = ad.div(centered, ad.sqrt(ad.add(var, self.eps)))
        normed = ad.reshape(inv, (n, c, h, w))
        scale = ad.reshape(self.weight, (1, c, 1, 1))
        shift = ad.reshape(self.bias, (1, c, 1, 1))
        return ad.add(ad.mul(normed, scale), shift)


def split_heads(x, heads):
    """(..., n, c) -> (..., heads, n, c // heads)"""
    *lead, n, c = x.shape
    x = ad.reshape(x, (*lead, n, heads, c // heads))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return ad.transpose(x, axes)


def merge_heads(x):
    """(..., heads, n, d) -> (..., n, heads * d)"""
    *lead, heads, n, d = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return ad.reshape(ad.transpose(x, axes), (*lead, n, heads * d))


def attention(q, k, v):
    """Scaled dot-product attention over the last two axes (batched)."""
    d = q.shape[-1]
    # scale q rather than the much larger score matrix
    scaled = ad.mul(q, 1.0 / math.sqrt(d))
    k_t = ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    return ad.matmul(ad.softmax(ad.matmul(scaled, k_t), axis=-1), v)


def mask_attn(q, k, v, mask=None):
    """Attention rows for every query of a single token set.

    ``q``: (n_q, d), ``k``/``v``: (n_k, d), optional ``mask``: (n_q,) weights
    in [0, 1]. Restricting queries to a spatial region is equivalent to
    weighting the attention output by that region afterwards, so this returns
    the full attention output for all queries and the caller applies the mask
    when it mixes the per-identity answers; ``mask`` is validated here only.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("mask_attn expects 2-D token arrays")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"{k.shape[0]} keys vs {v.shape[0]} values")
    if mask is not None and np.asarray(mask).shape != (q.shape[0],):
        raise ShapeError(f"mask must have one weight per query, got "
                         f"{np.asarray(mask).shape} for {q.shape[0]} queries")
    return attention(q, k, v)


def sinusoidal_embedding(positions, dim, dtype=np.float32, max_period=10000.0):
    """Fixed sin/cos features for integer positions; shape (len(positions), dim)."""
    positions = np.atleast_1d(np.asarray(positions, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = positions[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(dtype)
