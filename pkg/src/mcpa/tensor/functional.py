"""Differentiable primitives over :class:`~mcpa.tensor.core.Tensor`.

Each function computes with raw numpy arrays and registers a closure that
maps the output gradient to input gradients. Shape checks raise
:class:`ShapeError` with both shapes in the message; nothing broadcasts
silently beyond documented batch dimensions.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf

from .core import ShapeError, Tensor, as_tensor, make_result, unbroadcast
from . import convkern

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _coerce_pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    return a, b


# --- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    a, b = _coerce_pair(a, b)
    out = a.data + b.data

    def bwd(g):
        return unbroadcast(g, a.data.shape), unbroadcast(g, b.data.shape)

    return make_result(out, (a, b), bwd, "add")


def sub(a, b):
    a, b = _coerce_pair(a, b)
    out = a.data - b.data

    def bwd(g):
        return unbroadcast(g, a.data.shape), unbroadcast(-g, b.data.shape)

    return make_result(out, (a, b), bwd, "sub")


def mul(a, b):
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return make_result(out, (a, b), bwd, "mul")


def div(a, b):
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * ad / (bd * bd), bd.shape)

    return make_result(out, (a, b), bwd, "div")


def neg(a):
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def pow_scalar(a, p: float):
    ad = a.data
    out = ad**p

    def bwd(g):
        return (g * p * ad ** (p - 1),)

    return make_result(out, (a,), bwd, "pow")


def exp(a):
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return make_result(out, (a,), bwd, "exp")


def log(a):
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return make_result(np.log(ad), (a,), bwd, "log")


def sqrt(a):
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return make_result(out, (a,), bwd, "sqrt")


def maximum(a, b):
    """Elementwise max; ties route their gradient to the first argument."""
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data
    out = np.maximum(ad, bd)

    def bwd(g):
        take_a = ad >= bd
        return (
            unbroadcast(g * take_a, ad.shape),
            unbroadcast(g * ~take_a, bd.shape),
        )

    return make_result(out, (a, b), bwd, "maximum")


# --- reductions ---------------------------------------------------------------


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    ad = a.data
    out = ad.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, ad.shape).copy(),)

    return make_result(out, (a,), bwd, "sum")


def mean(a, axis=None, keepdims=False):
    ad = a.data
    out = ad.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = ad.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= ad.shape[ax]

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, ad.shape).copy(),)

    return make_result(out, (a,), bwd, "mean")


# --- shape plumbing -----------------------------------------------------------


def reshape(a, shape):
    old = a.data.shape
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return make_result(out, (a,), bwd, "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return make_result(out, (a,), bwd, "transpose")


def concat(tensors, axis: int):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, tuple(tensors), bwd, "concat")


def getitem(a, key):
    out = a.data[key]
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return make_result(out, (a,), bwd, "getitem")


Tensor.__getitem__ = getitem


# --- matmul -------------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product a[..,m,k] @ b[..,k,n]; leading dims broadcast."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return make_result(out, (a, b), bwd, "matmul")


# --- activations and normalisation ---------------------------------------------


def relu(a):
    ad = a.data
    out = np.maximum(ad, 0)

    def bwd(g):
        return (g * (ad > 0),)

    return make_result(out, (a,), bwd, "relu")


def gelu(a):
    """Exact (erf-based) GELU."""
    ad = a.data
    cdf = 0.5 * (1.0 + _erf(ad * _INV_SQRT2))
    out = ad * cdf

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * ad * ad)
        return (g * (cdf + ad * pdf),)

    return make_result(out, (a,), bwd, "gelu")


def softmax_lastdim(a):
    """Stable softmax over the last dimension (max-subtracted)."""
    ad = a.data
    if ad.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last dim, got {ad.shape}")
    shifted = ad - ad.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return make_result(out, (a,), bwd, "softmax")


def log_softmax_lastdim(a):
    ad = a.data
    shifted = ad - ad.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return make_result(out, (a,), bwd, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-6):
    """Normalise the last (channel) dimension, then scale and shift."""
    xd = x.data
    if gamma.data.shape != (xd.shape[-1],) or beta.data.shape != (xd.shape[-1],):
        raise ShapeError(
            f"layer_norm scale/shift must be ({xd.shape[-1]},), got "
            f"{gamma.data.shape} / {beta.data.shape}"
        )
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data * xhat + beta.data

    def bwd(g):
        dgamma = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        dbeta = g.reshape(-1, xd.shape[-1]).sum(axis=0)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), bwd, "layer_norm")


def linear(x, weight, bias=None):
    """x[.., in] @ weight[in, out] (+ bias)."""
    y = matmul(x, weight)
    if bias is not None:
        y = add(y, bias)
    return y


# --- convolution family ---------------------------------------------------------


def _conv_out_size(size, k, s, p):
    out = (size + 2 * p - k) // s + 1
    if size + 2 * p < k:
        raise ShapeError(f"kernel {k} larger than padded input {size + 2 * p}")
    if out < 1:
        raise ShapeError(f"convolution output collapsed: size={size} k={k} s={s} p={p}")
    return out


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1):
    """Standard / grouped / depthwise 2-D convolution on NCHW tensors.

    weight is (C_out, C_in/groups, kh, kw); depthwise is groups == C_in with
    one filter per channel.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW x and OIHW weight, got {xd.shape}, {wd.shape}")
    n, ci, h, w = xd.shape
    co, cig, kh, kw = wd.shape
    if ci != cig * groups or co % groups != 0:
        raise ShapeError(
            f"conv2d channel mismatch: x has {ci} channels, weight {wd.shape} with groups={groups}"
        )
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(w, kw, stride, padding)

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = convkern.im2col(xp, kh, kw, stride, stride, oh, ow)
    if groups == 1:
        w2 = wd.reshape(co, ci * kh * kw)
        y = w2 @ cols
    else:
        cols_g = cols.reshape(n, groups, cig * kh * kw, oh * ow)
        w_g = wd.reshape(groups, co // groups, cig * kh * kw)
        y = np.einsum("ngkl,gok->ngol", cols_g, w_g).reshape(n, co, oh * ow)
    if bias is not None:
        y = y + bias.data[:, None]
    y = y.reshape(n, co, oh, ow)

    def bwd(g):
        gf = g.reshape(n, co, oh * ow)
        if groups == 1:
            w2b = wd.reshape(co, ci * kh * kw)
            dw = np.einsum("nol,nkl->ok", gf, cols).reshape(wd.shape)
            dcols = np.einsum("ok,nol->nkl", w2b, gf)
        else:
            gf_g = gf.reshape(n, groups, co // groups, oh * ow)
            cols_gb = cols.reshape(n, groups, cig * kh * kw, oh * ow)
            w_gb = wd.reshape(groups, co // groups, cig * kh * kw)
            dw = np.einsum("ngol,ngkl->gok", gf_g, cols_gb).reshape(wd.shape)
            dcols = np.einsum("gok,ngol->ngkl", w_gb, gf_g).reshape(n, ci * kh * kw, oh * ow)
        dxp = convkern.col2im(
            dcols, n, ci, h + 2 * padding, w + 2 * padding, kh, kw, stride, stride, oh, ow
        )
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(gf.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(y, parents, bwd, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    """Transposed convolution: inverts the spatial mapping of conv2d at the
    same stride. weight is (C_in, C_out, kh, kw)."""
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects NCHW x and IOHW weight, got {xd.shape}, {wd.shape}")
    n, ci, h, w = xd.shape
    ciw, co, kh, kw = wd.shape
    if ci != ciw:
        raise ShapeError(f"conv_transpose2d channel mismatch: x {xd.shape} vs weight {wd.shape}")
    oh = (h - 1) * stride + kh - 2 * padding
    ow = (w - 1) * stride + kw - 2 * padding
    if oh < 1 or ow < 1:
        raise ShapeError(f"transposed conv output collapsed: in={h}x{w} k={kh} s={stride} p={padding}")

    w2 = wd.reshape(ci, co * kh * kw)
    xf = xd.reshape(n, ci, h * w)
    cols = np.einsum("ik,nil->nkl", w2, xf)
    ypad = convkern.col2im(cols, n, co, oh + 2 * padding, ow + 2 * padding, kh, kw, stride, stride, h, w)
    y = ypad[:, :, padding : padding + oh, padding : padding + ow] if padding else ypad
    if bias is not None:
        y = y + bias.data[None, :, None, None]

    def bwd(g):
        gpad = (
            np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
            if padding
            else g
        )
        dcols = convkern.im2col(gpad, kh, kw, stride, stride, h, w)
        dx = np.einsum("ik,nkl->nil", w2, dcols).reshape(xd.shape)
        dw = np.einsum("nil,nkl->ik", xf, dcols).reshape(wd.shape)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(y, parents, bwd, "conv_transpose2d")


# --- token/grid helpers (compositions of the primitives above) ------------------


def tokens_to_grid(x, h: int, w: int):
    """(N, L, C) token sequence -> (N, C, H, W) grid; requires L == h*w."""
    n, l, c = x.data.shape
    if l != h * w:
        raise ShapeError(f"token count {l} does not factor as {h}x{w}")
    return transpose(reshape(x, (n, h, w, c)), (0, 3, 1, 2))


def grid_to_tokens(x):
    """(N, C, H, W) grid -> (N, H*W, C) tokens."""
    n, c, h, w = x.data.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def avg_pool2d(x, r: int):
    """Non-overlapping r x r mean pooling of an NCHW grid."""
    n, c, h, w = x.data.shape
    if h % r or w % r:
        raise ShapeError(f"grid {h}x{w} not divisible by pool rate {r}")
    if r == 1:
        return x
    y = reshape(x, (n, c, h // r, r, w // r, r))
    return mean(y, axis=(3, 5))


def upsample_nearest2d(x, r: int):
    """Nearest-neighbour r x upsampling of an NCHW grid."""
    if r == 1:
        return x
    n, c, h, w = x.data.shape
    y = reshape(x, (n, c, h, 1, w, 1))
    ones = Tensor(np.ones((1, 1, 1, r, 1, r), dtype=x.data.dtype))
    return reshape(mul(y, ones), (n, c, h * r, w * r))


def scaled_dot_attention(q, k, v, heads: int):
    """Multi-head softmax(Q K^T / sqrt(d)) V on (N, L, C) sequences."""
    nq, lq, cq = q.data.shape
    nk, lk, ck = k.data.shape
    nv, lv, cv = v.data.shape
    if not (cq == ck == cv):
        raise ShapeError(f"attention widths disagree: Q {cq}, K {ck}, V {cv}")
    if lk != lv:
        raise ShapeError(f"K/V lengths disagree: {lk} vs {lv}")
    if cq % heads:
        raise ShapeError(f"width {cq} not divisible by {heads} heads")
    d = cq // heads

    def split(t, n, l):
        return transpose(reshape(t, (n, l, heads, d)), (0, 2, 1, 3))

    qh = split(q, nq, lq)
    kh = split(k, nk, lk)
    vh = split(v, nv, lv)
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    ctx = matmul(softmax_lastdim(scores), vh)
    return reshape(transpose(ctx, (0, 2, 1, 3)), (nq, lq, cq))


# bind operators on Tensor

Tensor.__add__ = add
Tensor.__radd__ = lambda a, b: add(a, b)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda a, b: sub(Tensor(np.asarray(b, dtype=a.data.dtype)), a)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda a, b: mul(a, b)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda a, b: div(Tensor(np.asarray(b, dtype=a.data.dtype)), a)
Tensor.__neg__ = neg
Tensor.__pow__ = pow_scalar
Tensor.__matmul__ = matmul
