"""Differentiable primitives over :class:`~idenc.numerics.tensor.Tensor`.

Each op computes its forward value with numpy and returns a closure mapping
the output gradient to one gradient per input (``None`` for inputs that do not
need one). Reductions run in numpy's fixed pairwise order and convolutions go
through a single im2col matmul, so a forward pass is bit-reproducible for a
given input and thread count.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result

# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _needs(t: Tensor) -> bool:
    return t.requires_grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if _needs(a) else None,
                _unbroadcast(g, sb) if _needs(b) else None)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if _needs(a) else None,
                _unbroadcast(-g, sb) if _needs(b) else None)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if _needs(a) else None,
                _unbroadcast(g * ad, bd.shape) if _needs(b) else None)

    return make_result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if _needs(a) else None,
                _unbroadcast(-g * out / bd, bd.shape) if _needs(b) else None)

    return make_result(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = ad ** p

    def bw(g):
        return (g * p * ad ** (p - 1),)

    return make_result(out, (a,), bw, "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return make_result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)

    def bw(g):
        return (g * s * (1.0 + x * (1.0 - s)),)

    return make_result(x * s, (a,), bw, "silu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select elementwise; ``cond`` is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(np.where(cond, g, 0), sa) if _needs(a) else None,
                _unbroadcast(np.where(cond, 0, g), sb) if _needs(b) else None)

    return make_result(np.where(cond, a.data, b.data), (a, b), bw, "where")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_result(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= shape[ax]

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return make_result(np.mean(a.data, axis=axes, keepdims=keepdims), (a,), bw, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return make_result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in parts)

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return make_result(a.data[idx], (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts], detail=f"axis={axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_result(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if _needs(a) else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if _needs(b) else None
        return ga, gb

    return make_result(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape)
    y = matmul(x, transpose(weight))
    if bias is not None:
        y = add(y, bias)
    return y


# ---------------------------------------------------------------------------
# normalisation and attention


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (a,), bw, "softmax")


def logsumexp(a, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """log Σ exp over ``axis``, optionally restricted to entries where ``mask`` is true.

    Rows whose mask is entirely false yield -inf.
    """
    a = as_tensor(a)
    x = a.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    xm = np.where(mask, x, -np.inf)
    m = xm.max(axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x, m_safe) - m_safe), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = np.log(s) + m_safe
    w = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
    out_sq = np.squeeze(out, axis=axis)

    def bw(g):
        return (np.expand_dims(g, axis) * w,)

    return make_result(out_sq.astype(x.dtype, copy=False), (a,), bw, "logsumexp")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    lse = logsumexp(a, axis=axis)
    return sub(a, reshape(lse, lse.shape[:axis % a.ndim] + (1,) + lse.shape[axis % a.ndim:]))


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalisation over (C/groups, H, W) for NCHW input."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2 or x.shape[1] % groups:
        raise ShapeError("group_norm", x.shape, detail=f"channels not divisible by groups={groups}")
    B, C = x.shape[:2]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("group_norm", x.shape, gamma.shape, beta.shape)
    xr = x.data.reshape(B, groups, -1)
    n = xr.shape[-1]
    mu = xr.mean(axis=-1, keepdims=True)
    xc = xr - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gx = None
        if _needs(x):
            dxhat = (g * gd).reshape(B, groups, n)
            xh = xhat.reshape(B, groups, n)
            gx = (inv / n) * (n * dxhat - dxhat.sum(-1, keepdims=True)
                              - xh * (dxhat * xh).sum(-1, keepdims=True))
            gx = gx.reshape(x.shape)
        ggamma = (g * xhat).sum(axis=red) if _needs(gamma) else None
        gbeta = g.sum(axis=red) if _needs(beta) else None
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), bw, "group_norm")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    xd = x.data
    mu = xd.mean(-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = None
        if _needs(x):
            dxhat = g * gamma.data
            gx = (inv / D) * (D * dxhat - dxhat.sum(-1, keepdims=True)
                              - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        ggamma = (g * xhat).sum(axis=lead) if _needs(gamma) else None
        gbeta = g.sum(axis=lead) if _needs(beta) else None
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), bw, "layer_norm")


def scaled_dot_product_attention(q, k, v) -> Tensor:
    """softmax(q kᵀ / √d) v over the last two axes; q (..., Lq, d), k/v (..., Lk, d)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    scale = 1.0 / math.sqrt(q.shape[-1])
    kt = transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    weights = softmax(mul(matmul(q, kt), scale), axis=-1)
    return matmul(weights, v)


# ---------------------------------------------------------------------------
# convolution and resampling


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, weight (O, C, k, k).

    Columns are laid out as (B, C·k·k, Ho·Wo) so the product with the
    (O, C·k·k) weight matrix lands directly in NCHW order.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    Ho, Wo = _out_size(H, kh, stride, padding), _out_size(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")
    wd = weight.data
    wm = wd.reshape(O, -1)
    pointwise = kh == 1 and kw == 1 and padding == 0

    if pointwise:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = xs.reshape(B, C, Ho * Wo)
    else:
        if padding:
            xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=x.data.dtype)
            xp[:, :, padding:padding + H, padding:padding + W] = x.data
        else:
            xp = x.data
        cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
        cols = cols.reshape(B, C * kh * kw, Ho * Wo)

    out = np.matmul(wm, cols)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
    out = out.reshape(B, O, Ho, Wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = g.reshape(B, O, Ho * Wo)
        gx = gw = gb = None
        if _needs(weight):
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        if bias is not None and _needs(bias):
            gb = gm.sum(axis=(0, 2))
        if _needs(x):
            dcols = np.matmul(wm.T, gm)
            if pointwise:
                d = dcols.reshape(B, C, Ho, Wo)
                if stride > 1:
                    gx = np.zeros(x.shape, dtype=d.dtype)
                    gx[:, :, ::stride, ::stride] = d
                else:
                    gx = d
            else:
                dcols = dcols.reshape(B, C, kh, kw, Ho, Wo)
                gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=dcols.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
                gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, bw, "conv2d")


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample_nearest", x.shape)
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), bw, "upsample_nearest")


def avg_pool2d(x, factor: int) -> Tensor:
    """Non-overlapping ``factor``×``factor`` block mean."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % factor or x.shape[3] % factor:
        raise ShapeError("avg_pool2d", x.shape, detail=f"spatial dims not divisible by {factor}")
    B, C, H, W = x.shape
    h, w = H // factor, W // factor
    out = x.data.reshape(B, C, h, factor, w, factor).mean(axis=(3, 5))
    scale = 1.0 / (factor * factor)

    def bw(g):
        gx = np.broadcast_to((g * scale)[:, :, :, None, :, None], (B, C, h, factor, w, factor))
        return (gx.reshape(B, C, H, W),)

    return make_result(out, (x,), bw, "avg_pool2d")
