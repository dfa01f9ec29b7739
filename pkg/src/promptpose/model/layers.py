"""Reusable building blocks: linear/MLP, layer norm, attention, convolution."""

from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad
from ..errors import ShapeError
from ..optim import make_param

_IM2COL_CACHE = {}
_GRID_CACHE = {}


class Linear:
    def __init__(self, store, name, din, dout, rng, group="other", w_scale=None, bias_init=0.0):
        self.w = make_param(store, f"{name}.weight", rng, (din, dout), scale=w_scale, group=group)
        self.b = make_param(store, f"{name}.bias", rng, (dout,), init="zeros", group=group)
        if bias_init != 0.0:
            self.b.data[:] = bias_init

    def __call__(self, x):
        return x @ self.w + self.b

    def zero_(self):
        self.w.data[:] = 0.0
        self.b.data[:] = 0.0


class MLP:
    """Linear stack with gelu between layers."""

    def __init__(self, store, name, dims, rng, group="other"):
        self.layers = [
            Linear(store, f"{name}.{i}", dims[i], dims[i + 1], rng, group=group)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.gelu(x)
        return x


class LayerNorm:
    def __init__(self, store, name, dim, rng, group="other", eps=1e-5):
        self.gain = make_param(store, f"{name}.gain", rng, (dim,), init="zeros", group=group)
        self.gain.data[:] = 1.0
        self.bias = make_param(store, f"{name}.bias", rng, (dim,), init="zeros", group=group)
        self.eps = eps

    def __call__(self, x, axis=-1):
        return ad.layer_norm(x, axis, self.gain, self.bias, eps=self.eps)


class MultiHeadAttention:
    """Standard scaled dot-product cross attention.

    Returns (output, attention) where attention has shape (heads, Q, L) and
    every row sums to one.
    """

    def __init__(self, store, name, dim, heads, rng, group="other"):
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(store, f"{name}.q", dim, dim, rng, group=group)
        self.k = Linear(store, f"{name}.k", dim, dim, rng, group=group)
        self.v = Linear(store, f"{name}.v", dim, dim, rng, group=group)
        self.out = Linear(store, f"{name}.out", dim, dim, rng, group=group)

    def _split(self, x, length):
        # (L, D) -> (heads, L, head_dim)
        return ad.transpose(x.reshape(length, self.heads, self.head_dim), (1, 0, 2))

    def __call__(self, queries, keys_values):
        nq = queries.shape[0]
        nk = keys_values.shape[0]
        q = self._split(self.q(queries), nq)
        k = self._split(self.k(keys_values), nk)
        v = self._split(self.v(keys_values), nk)
        logits = ad.bmm(q, ad.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(self.head_dim))
        attn = ad.softmax(logits, axis=-1)
        ctx = ad.bmm(attn, v)  # (heads, Q, head_dim)
        merged = ad.transpose(ctx, (1, 0, 2)).reshape(nq, self.dim)
        return self.out(merged), attn


class FeedForward:
    """Pre-norm FFN sublayer: x + W2 gelu(W1 LN(x))."""

    def __init__(self, store, name, dim, hidden, rng, group="other"):
        self.norm = LayerNorm(store, f"{name}.norm", dim, rng, group=group)
        self.fc1 = Linear(store, f"{name}.fc1", dim, hidden, rng, group=group)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, dim, rng, group=group)

    def __call__(self, x):
        return x + self.fc2(ad.gelu(self.fc1(self.norm(x))))


def conv2d(x, weight, bias, kernel, stride, pad):
    """2-D convolution of (C_in, H, W) with weight (C_in*k*k, C_out).

    Output extents use floor arithmetic: (H + 2p - k)//s + 1.
    """
    c_in, h, w = x.shape
    padded = ad.pad2d(x, pad)
    hp, wp = h + 2 * pad, w + 2 * pad
    h_out = (hp - kernel) // stride + 1
    w_out = (wp - kernel) // stride + 1
    idx = _im2col_indices(c_in, hp, wp, kernel, stride, h_out, w_out)
    cols = ad.take_flat(padded, idx)  # (h_out*w_out, c_in*k*k)
    out = cols @ weight + bias  # (h_out*w_out, c_out)
    return ad.transpose(out.reshape(h_out, w_out, weight.shape[1]), (2, 0, 1))


def _im2col_indices(c_in, hp, wp, kernel, stride, h_out, w_out):
    key = (c_in, hp, wp, kernel, stride)
    if key not in _IM2COL_CACHE:
        rows = (np.arange(h_out) * stride)[:, None, None, None, None]
        cols = (np.arange(w_out) * stride)[None, :, None, None, None]
        ch = np.arange(c_in)[None, None, :, None, None]
        ky = np.arange(kernel)[None, None, None, :, None]
        kx = np.arange(kernel)[None, None, None, None, :]
        idx = ch * (hp * wp) + (rows + ky) * wp + (cols + kx)
        _IM2COL_CACHE[key] = idx.reshape(h_out * w_out, c_in * kernel * kernel)
    return _IM2COL_CACHE[key]


class Conv2d:
    def __init__(self, store, name, c_in, c_out, rng, kernel=3, stride=1, pad=1, group="other"):
        fan = c_in * kernel * kernel
        scale = math.sqrt(6.0 / (fan + c_out))
        self.weight = make_param(store, f"{name}.weight", rng, (fan, c_out), scale=scale, group=group)
        self.bias = make_param(store, f"{name}.bias", rng, (c_out,), init="zeros", group=group)
        self.kernel = kernel
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.kernel, self.stride, self.pad)


def resize_bilinear(fmap, out_h, out_w):
    """Bilinearly resample a (C, H, W) map onto an out_h x out_w center grid."""
    key = (out_h, out_w)
    if key not in _GRID_CACHE:
        ys, xs = np.mgrid[0:out_h, 0:out_w]
        grid = np.stack([(xs.ravel() + 0.5) / out_w, (ys.ravel() + 0.5) / out_h], axis=1)
        _GRID_CACHE[key] = grid
    sampled = ad.bilinear_sample(fmap, ad.Tensor(_GRID_CACHE[key]))  # (P, C)
    return ad.transpose(sampled.reshape(out_h, out_w, fmap.shape[0]), (2, 0, 1))


def sinusoidal_encoding(points, dim, temperature=10000.0):
    """Fixed 2-D sinusoidal encoding of (P, 2) normalized points -> (P, dim).

    Half the channels encode x, half encode y, alternating sin/cos within
    each half (dim must be divisible by 4).
    """
    quarter = dim // 4
    freqs = (2.0 * math.pi) / temperature ** (np.arange(quarter) / quarter)
    freqs = ad.Tensor(freqs.reshape(1, quarter))
    parts = []
    for axis in (0, 1):
        coord = points[:, axis:axis + 1]
        phase = coord * freqs  # broadcast (P, 1) * (1, quarter)
        parts.extend([ad.sin(phase), ad.cos(phase)])
    return ad.concat(parts, axis=1)
