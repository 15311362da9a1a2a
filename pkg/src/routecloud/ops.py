"""Differentiable operators used by the encoder, decoder and loss.

Shapes follow the conventions of the model code: point features are
``n x f`` row matrices, images are channel-first ``c x h x w``.
Elementwise binary ops accept numpy-style broadcasting and reduce the
gradient back to each operand's shape.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor, make_result

__all__ = [
    "Segments",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "linear",
    "relu",
    "gelu",
    "sigmoid",
    "mean",
    "sum",
    "reshape",
    "transpose",
    "gather_rows",
    "scatter_sum",
    "segmented_softmax",
    "softmax",
    "depthwise_conv2d",
    "conv2d",
    "upsample2x",
    "concat",
    "pad2d",
    "crop2d",
]


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


def add(a, b):
    a, b = _pair(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot combine {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), bw, "add")


def sub(a, b):
    a, b = _pair(a, b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: cannot combine {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), bw, "sub")


def mul(a, b):
    a, b = _pair(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot combine {a.shape} and {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "mul")


def neg(a):
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c):
    """Multiply by a Python scalar constant."""
    a = as_tensor(a)
    c = a.dtype.type(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` for ``x`` of shape ``n x a`` and ``weight`` ``a x b``."""
    x = as_tensor(x)
    weight = as_tensor(weight, dtype=x.dtype)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias, dtype=x.dtype)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_result(out, parents, bw, "linear")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_result(out.astype(x.dtype, copy=False), (x,), bw, "gelu")


def sigmoid(x):
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    inv = x.dtype.type(1.0 / count) if count else x.dtype.type(0)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), bw, "mean")


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_result(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


class Segments:
    """Membership of ``n`` rows in ``m`` segments.

    Caches the one-hot CSR matrix used for summation. Row indices inside a
    CSR row are ascending, so every segment sum accumulates its members in
    ascending original index order, starting from zero.
    """

    def __init__(self, segment_of, num_segments=None):
        ids = np.asarray(segment_of, dtype=np.int64).reshape(-1)
        if num_segments is None:
            num_segments = int(ids.max()) + 1 if ids.size else 0
        if ids.size and ids.min() < 0:
            raise IndexError("segment ids must be non-negative")
        if ids.size and ids.max() >= num_segments:
            raise IndexError(f"segment id {int(ids.max())} out of range for {num_segments} segments")
        self.ids = ids
        self.n = ids.size
        self.m = int(num_segments)
        self._matrices = {}
        self._order = None

    @classmethod
    def coerce(cls, segment_of, num_segments=None):
        if isinstance(segment_of, Segments):
            if num_segments is not None and num_segments != segment_of.m:
                raise IndexError(f"segments built for m={segment_of.m}, asked for {num_segments}")
            return segment_of
        return cls(segment_of, num_segments)

    def matrix(self, dtype=np.float64):
        dtype = np.dtype(dtype)
        mat = self._matrices.get(dtype)
        if mat is None:
            data = np.ones(self.n, dtype=dtype)
            mat = sp.csr_matrix((data, (self.ids, np.arange(self.n))), shape=(self.m, self.n))
            mat.sort_indices()
            self._matrices[dtype] = mat
        return mat

    @property
    def sort_order(self):
        if self._order is None:
            self._order = np.argsort(self.ids, kind="stable")
        return self._order

    def sum(self, values):
        """Segment sums of the rows of ``values`` (``n x ...``)."""
        v = np.asarray(values)
        flat = v.reshape(self.n, -1)
        out = self.matrix(v.dtype) @ flat
        return np.asarray(out, dtype=v.dtype).reshape((self.m,) + v.shape[1:])

    def max(self, values):
        v = np.asarray(values)
        out = np.full((self.m,) + v.shape[1:], -np.inf, dtype=v.dtype)
        if self.n == 0:
            return out
        order = self.sort_order
        sorted_ids = self.ids[order]
        starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
        out[sorted_ids[starts]] = np.maximum.reduceat(v[order], starts, axis=0)
        return out


def gather_rows(x, index):
    """``out[i] = x[index[i]]``; the backward pass is a segment sum."""
    x = as_tensor(x)
    seg = Segments.coerce(index, x.shape[0])

    def bw(g):
        return (seg.sum(g),)

    return make_result(x.data[seg.ids], (x,), bw, "gather_rows")


def scatter_sum(values, segment_of, num_segments=None):
    """Sum rows of ``values`` that share a segment id; empty segments are zero."""
    values = as_tensor(values)
    seg = Segments.coerce(segment_of, num_segments)
    if values.shape[0] != seg.n:
        raise DimensionError(f"scatter_sum: {values.shape[0]} rows but {seg.n} segment ids")
    out = seg.sum(values.data)

    def bw(g):
        return (g[seg.ids],)

    return make_result(out, (values,), bw, "scatter_sum")


def segmented_softmax(scores, segment_of, num_segments=None):
    """Softmax of ``scores`` over the rows sharing a segment.

    ``scores`` is ``n`` or ``n x k``; with two dimensions each column is
    normalized independently.
    """
    scores = as_tensor(scores)
    seg = Segments.coerce(segment_of, num_segments)
    if scores.shape[0] != seg.n:
        raise DimensionError(f"segmented_softmax: {scores.shape[0]} scores but {seg.n} segment ids")
    if seg.n == 0:
        return make_result(scores.data.copy(), (scores,), lambda g: (g,), "segmented_softmax")
    s = scores.data
    shifted = s - seg.max(s)[seg.ids]
    e = np.exp(shifted)
    out = e / seg.sum(e)[seg.ids]

    def bw(g):
        dot = seg.sum(g * out)
        return (out * (g - dot[seg.ids]),)

    return make_result(out, (scores,), bw, "segmented_softmax")


def softmax(x, axis=-1):
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw, "softmax")


def _check_odd(kh, kw):
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel extents must be odd, got {kh}x{kw}")


def depthwise_conv2d(x, kernel):
    """Per-channel 2-D correlation with zero 'same' padding.

    ``x`` is ``c x h x w`` and ``kernel`` is ``c x kh x kw``.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel, dtype=x.dtype)
    if x.ndim != 3 or kernel.ndim != 3 or kernel.shape[0] != x.shape[0]:
        raise DimensionError(f"depthwise_conv2d: input {x.shape} vs kernel {kernel.shape}")
    c, h, w = x.shape
    _, kh, kw = kernel.shape
    _check_odd(kh, kw)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    k = kernel.data
    out = np.zeros_like(x.data)
    for a in range(kh):
        for b in range(kw):
            out += k[:, a, b, None, None] * xp[:, a:a + h, b:b + w]

    def bw(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, a:a + h, b:b + w] += k[:, a, b, None, None] * g
            gx = gxp[:, ph:ph + h, pw:pw + w]
        if kernel.requires_grad:
            gk = np.empty_like(k)
            for a in range(kh):
                for b in range(kw):
                    gk[:, a, b] = np.einsum("chw,chw->c", g, xp[:, a:a + h, b:b + w])
        return gx, gk

    return make_result(out, (x, kernel), bw, "depthwise_conv2d")


def conv2d(x, weight, bias=None, stride=1):
    """Dense 2-D correlation, zero padding ``k // 2``.

    ``x`` is ``c x h x w``; ``weight`` is ``o x c x kh x kw``. With stride 2
    the output is ``ceil(h / 2) x ceil(w / 2)``.
    """
    x = as_tensor(x)
    weight = as_tensor(weight, dtype=x.dtype)
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    c, h, w = x.shape
    o, _, kh, kw = weight.shape
    _check_odd(kh, kw)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    oh, ow = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, oh * ow)
    w2 = weight.data.reshape(o, -1)
    out = (w2 @ cols).reshape(o, oh, ow)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias, dtype=x.dtype)
        out += bias.data[:, None, None]
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(o, -1)
        gx = gw = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, kh, kw, oh, ow)
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, a:a + stride * oh:stride, b:b + stride * ow:stride] += gcols[:, a, b]
            gx = gxp[:, ph:ph + h, pw:pw + w]
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return make_result(out, parents, bw, "conv2d")


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of a ``c x h x w`` image."""
    x = as_tensor(x)
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bw(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return make_result(out, (x,), bw, "upsample2x")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    dtype = tensors[0].dtype
    tensors = [as_tensor(t, dtype=dtype) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, bw, "concat")


def pad2d(x, height, width):
    """Zero-pad a ``c x h x w`` image at the bottom/right to ``height x width``."""
    x = as_tensor(x)
    c, h, w = x.shape
    if height < h or width < w:
        raise DimensionError(f"pad2d: target {height}x{width} smaller than {h}x{w}")
    out = np.pad(x.data, ((0, 0), (0, height - h), (0, width - w)))
    return make_result(out, (x,), lambda g: (g[:, :h, :w],), "pad2d")


def crop2d(x, height, width):
    """Keep the top-left ``height x width`` window of a ``c x h x w`` image."""
    x = as_tensor(x)
    c, h, w = x.shape

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :height, :width] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[:, :height, :width]), (x,), bw, "crop2d")
