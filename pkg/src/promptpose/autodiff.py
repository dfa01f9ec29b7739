"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every differentiable operation records a :class:`TapeNode` linking the output
tensor to its inputs and a backward closure. ``backward(loss)`` replays the
recorded nodes in reverse topological order and accumulates gradients into
every reachable tensor with ``requires_grad``. Nodes are consumed by the
replay, so backpropagating twice through the same subgraph raises.

All data is 64-bit: the gradient checks in the test-suite compare analytic
gradients against central finite differences at tight tolerances.
"""

from __future__ import annotations

import contextlib
import contextvars
import math

import numpy as np
from scipy.special import erf

from .errors import ContractError, InvalidInputError, ShapeError

_GRAD_ENABLED = contextvars.ContextVar("promptpose_grad_enabled", default=True)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only inference)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled():
    return _GRAD_ENABLED.get()


class TapeNode:
    """One recorded operation.

    ``backward_fn`` maps the output gradient to a tuple of input gradients
    aligned with ``inputs`` (``None`` entries are skipped).
    """

    __slots__ = ("op", "inputs", "backward_fn", "out", "released")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.out = None
        self.released = False


class Tensor:
    """A float64 array participating in the tape.

    The wrapped array is adopted, not copied; callers must not mutate it
    behind the tape's back while a graph referencing it is alive.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar -------------------------------------------------------
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

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_view(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_along(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_along(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _scalar_error(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out_data, inputs, op, backward_fn):
    out = Tensor(out_data)
    if _GRAD_ENABLED.get() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = TapeNode(op, inputs, backward_fn)
        node.out = out
        out.node = node
    return out


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    ``loss`` must be a single-element tensor produced by taped operations.
    The traversed tape segment is released; a second backward through it
    (without re-running the forward pass) raises ``ContractError``.
    """
    if not isinstance(loss, Tensor) or loss.node is None:
        raise ContractError("backward: value was not produced by taped operations")
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")

    topo = []
    seen = set()
    stack = [(loss.node, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.released:
            raise ContractError(
                f"backward: tape segment for op '{node.op}' already consumed; re-run the forward pass"
            )
        stack.append((node, True))
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append((t.node, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        node.released = True
        g_out = node.out.grad
        if g_out is None:
            continue
        grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), "add", back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), "sub", back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def back(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(out, (a, b), "mul", back)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make(out, (a, b), "div", back)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def pow_const(a, p):
    a = as_tensor(a)
    p = float(p)
    out = a.data**p

    def back(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, (a,), "pow", back)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    out = np.log(a.data)
    return _make(out, (a,), "log", lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def absolute(a):
    a = as_tensor(a)
    out = np.abs(a.data)
    return _make(out, (a,), "abs", lambda g: (g * np.sign(a.data),))


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = np.maximum(a.data, b.data)

    def back(g):
        take_a = a.data >= b.data
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return _make(out, (a, b), "maximum", back)


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = np.minimum(a.data, b.data)

    def back(g):
        take_a = a.data <= b.data
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return _make(out, (a, b), "minimum", back)


def clip(a, lo, hi):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def back(g):
        inside = (a.data >= lo) & (a.data <= hi)
        return (g * inside,)

    return _make(out, (a,), "clip", back)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), "relu", lambda g: (g * (a.data > 0.0),))


def sigmoid(a):
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def sin(a):
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), "sin", lambda g: (g * np.cos(a.data),))


def cos(a):
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), "cos", lambda g: (-g * np.sin(a.data),))


def gelu(a):
    """Exact Gaussian-error-linear unit, 0.5*x*(1+erf(x/sqrt(2)))."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _make(out, (a,), "gelu", back)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}")
    out = a.data @ b.data

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), "matmul", back)


def bmm(a, b):
    """Batched matmul: (B,m,p) @ (B,p,q) -> (B,m,q)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"bmm expects matching 3-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"bmm inner extents differ: {a.data.shape} vs {b.data.shape}")
    out = a.data @ b.data

    def back(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _make(out, (a, b), "bmm", back)


# -- shape manipulation ------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), "reshape", lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _make(out, (a,), "transpose", lambda g: (np.transpose(g, inv),))


def slice_view(a, key):
    """Basic slicing / integer indexing (no index arrays; see take_flat)."""
    a = as_tensor(a)
    out = a.data[key]

    def back(g):
        gx = np.zeros_like(a.data)
        gx[key] += g
        return (gx,)

    return _make(np.ascontiguousarray(out), (a,), "slice", back)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), "concat", back)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.ascontiguousarray(np.squeeze(p, axis=axis)) for p in parts)

    return _make(out, tuple(tensors), "stack", back)


def pad2d(a, pad):
    """Zero-pad the trailing two axes by ``pad`` on every side."""
    a = as_tensor(a)
    if pad == 0:
        return a
    width = [(0, 0)] * (a.data.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, width)
    sl = (slice(None),) * (a.data.ndim - 2) + (slice(pad, -pad), slice(pad, -pad))

    def back(g):
        return (np.ascontiguousarray(g[sl]),)

    return _make(out, (a,), "pad2d", back)


def sum_along(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _make(out, (a,), "sum", back)


def mean_along(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return mul(sum_along(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- gathers -----------------------------------------------------------------

def take_flat(a, idx):
    """Gather ``a.flat[idx]`` for an arbitrary integer index array."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data.reshape(-1)[idx]

    def back(g):
        gx = np.zeros(a.data.size)
        np.add.at(gx, idx.reshape(-1), g.reshape(-1))
        return (gx.reshape(a.data.shape),)

    return _make(out, (a,), "take_flat", back)


def gather_rows(a, ids):
    """Row lookup ``a[ids]`` (embedding-style); duplicates accumulate."""
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    out = a.data[ids]

    def back(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, ids, g)
        return (gx,)

    return _make(out, (a,), "gather_rows", back)


# -- fused numeric kernels ---------------------------------------------------

def softmax(a, axis=-1):
    """Numerically-stabilized softmax along ``axis``."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), "softmax", back)


def layer_norm(a, axis, gain, bias, eps=1e-5):
    """Normalize to zero mean / unit variance along ``axis``, then affine.

    ``gain`` and ``bias`` are 1-D with the extent of ``axis``.
    """
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    n = a.data.shape[axis]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({n},), got {gain.data.shape} and {bias.data.shape}"
        )
    bshape = [1] * a.data.ndim
    bshape[axis] = n
    gain_b = gain.data.reshape(bshape)
    bias_b = bias.data.reshape(bshape)

    mu = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gain_b + bias_b

    def back(g):
        other = tuple(i for i in range(a.data.ndim) if i != (axis % a.data.ndim))
        dgain = (g * xhat).sum(axis=other)
        dbias = g.sum(axis=other)
        dxhat = g * gain_b
        m1 = dxhat.mean(axis=axis, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return dx, dgain, dbias

    return _make(out, (a, gain, bias), "layer_norm", back)


def bilinear_sample(fmap, points):
    """Bilinearly sample a (C, H, W) map at P normalized (x, y) locations.

    Coordinates live in [0, 1]^2 with pixel (r, c) centered at
    ((c + 0.5)/W, (r + 0.5)/H); neighbours outside the map read zero, so
    values fade to zero beyond the border. Differentiable w.r.t. both the
    map and the points. Returns (P, C).
    """
    fmap, points = as_tensor(fmap), as_tensor(points)
    if fmap.data.ndim != 3:
        raise ShapeError(f"bilinear_sample expects a (C,H,W) map, got {fmap.data.shape}")
    if points.data.ndim != 2 or points.data.shape[1] != 2:
        raise ShapeError(f"bilinear_sample expects (P,2) points, got {points.data.shape}")
    if not np.isfinite(points.data).all():
        raise InvalidInputError("bilinear_sample: non-finite sample coordinates")

    c, h, w = fmap.data.shape
    u = points.data[:, 0] * w - 0.5
    v = points.data[:, 1] * h - 0.5
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = u - x0
    fy = v - y0

    flat = fmap.data.reshape(c, h * w)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        cy = y0 + dy
        cx = x0 + dx
        inb = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
        lin = np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)
        vals = flat[:, lin].T * inb[:, None]
        corners.append((vals, lin, inb))
    v00, v01, v10, v11 = (cor[0] for cor in corners)
    w00 = (1.0 - fx) * (1.0 - fy)
    w01 = fx * (1.0 - fy)
    w10 = (1.0 - fx) * fy
    w11 = fx * fy
    out = v00 * w00[:, None] + v01 * w01[:, None] + v10 * w10[:, None] + v11 * w11[:, None]

    def back(g):
        gmap = np.zeros((h * w, c))
        for (vals, lin, inb), wgt in zip(corners, (w00, w01, w10, w11)):
            contrib = g * wgt[:, None]
            np.add.at(gmap, lin[inb], contrib[inb])
        gmap = gmap.T.reshape(c, h, w)

        du = ((v01 - v00) * (1.0 - fy)[:, None] + (v11 - v10) * fy[:, None]) * g
        dv = ((v10 - v00) * (1.0 - fx)[:, None] + (v11 - v01) * fx[:, None]) * g
        gpts = np.stack([du.sum(axis=1) * w, dv.sum(axis=1) * h], axis=1)
        return gmap, gpts

    return _make(out, (fmap, points), "bilinear_sample", back)


def inverse_sigmoid(a, eps=1e-6):
    """log(x / (1 - x)) with clamping away from {0, 1}."""
    x = clip(a, eps, 1.0 - eps)
    return log(div(x, sub(1.0, x)))
