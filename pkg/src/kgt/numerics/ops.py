"""Differentiable operators over :class:`Tensor`.

Broadcasting is deliberately narrow: elementwise ops need equal shapes (or
a Python scalar), ``matmul`` allows a 2-D right operand against a batched
left operand, and ``add_bias`` broadcasts along the last axis only.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from kgt.errors import DegenerateRowError, DimensionError
from kgt.numerics.tensor import Tensor, as_tensor, make_result, neg_sentinel

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return make_result(a.data + a.data.dtype.type(b), (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        return make_result(b.data.dtype.type(a) - b.data, (b,), lambda g: (-g,))
    if not isinstance(b, Tensor):
        return make_result(a.data - a.data.dtype.type(b), (a,), lambda g: (g,))
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = a.data.dtype.type(b)
        return make_result(a.data * c, (a,), lambda g: (g * c,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _same_shape(a, b, "mul")
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., j] + b[j]."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} vs bias {b.shape}")
    lead = tuple(range(x.ndim - 1))
    return make_result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared
    across the batch or has the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch mismatch {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_result(out, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return make_result(out, (x,), lambda g: (np.transpose(g, inv),))


def transpose_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Select ``indices`` along ``axis``; duplicates accumulate in backward."""
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    out = np.take(x.data, idx, axis=axis)
    n = x.shape[axis]
    unique = len(np.unique(idx)) == len(idx)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        sl = [slice(None)] * x.ndim
        sl[axis] = idx
        if unique:
            gx[tuple(sl)] = g
        else:
            moved = np.moveaxis(gx, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"take: index out of range for extent {n}")
    return make_result(out, (x,), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return make_result(np.asarray(x.data.sum()), (x,),
                       lambda g: (np.full(shape, g, dtype=x.dtype),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return make_result(np.asarray(x.data.mean()), (x,),
                       lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    # np.sign(0) == 0 gives the zero subgradient at ties
    return make_result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def softmax_kernel(x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Row-max-subtracted softmax along the last axis; may run in place."""
    if out is None:
        out = np.empty_like(x)
    np.subtract(x, x.max(axis=-1, keepdims=True), out=out)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def softmax_rows(x: Tensor, additive_mask=None) -> Tensor:
    """Softmax along the last axis, optionally after adding a 0 / sentinel mask."""
    logits = x.data
    if additive_mask is not None:
        m = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask)
        if m.shape != x.shape:
            raise DimensionError(f"softmax_rows: mask {m.shape} vs input {x.shape}")
        sentinel = neg_sentinel(logits.dtype)
        blocked = m <= sentinel * 0.5
        if blocked.all(axis=-1).any():
            raise DegenerateRowError("softmax_rows: a row is fully masked")
        logits = np.where(blocked, sentinel, logits + m.astype(logits.dtype))
    y = softmax_kernel(logits)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    xd = x.data
    cdf = erf(xd * xd.dtype.type(1.0 / _SQRT2))
    cdf += 1.0
    cdf *= 0.5
    out = xd * cdf

    def backward(g):
        d = xd * xd
        d *= -0.5
        np.exp(d, out=d)
        d *= xd.dtype.type(_INV_SQRT_2PI) * xd
        d += cdf
        d *= g
        return (d,)

    return make_result(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: affine {gamma.shape}/{beta.shape} vs width {n}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(xd.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


def _reflect_pad1(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise DimensionError(f"conv2d_3x3: reflect padding needs H,W >= 2, got {h}x{w}")
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")


def _fold_reflect1(gp: np.ndarray) -> np.ndarray:
    """Adjoint of ``_reflect_pad1``: route border gradients back to their sources."""
    h, w = gp.shape[-2] - 2, gp.shape[-1] - 2
    gh = gp[:, :, 1:h + 1, :].copy()
    gh[:, :, 1, :] += gp[:, :, 0, :]
    gh[:, :, h - 2, :] += gp[:, :, h + 1, :]
    gx = gh[:, :, :, 1:w + 1].copy()
    gx[:, :, :, 1] += gh[:, :, :, 0]
    gx[:, :, :, w - 2] += gh[:, :, :, w + 1]
    return gx


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution, stride 1, reflect padding 1.

    ``x`` is ``C_in x H x W`` or batched ``N x C_in x H x W``.
    """
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d_3x3: kernel must be C_out x C_in x 3 x 3, got {w.shape}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d_3x3: input must be 3-D or 4-D, got {x.shape}")
    n, cin, h, wd = xd.shape
    cout = w.shape[0]
    if w.shape[1] != cin:
        raise DimensionError(f"conv2d_3x3: input has {cin} channels, kernel expects {w.shape[1]}")
    if b.shape != (cout,):
        raise DimensionError(f"conv2d_3x3: bias {b.shape} vs {cout} output channels")

    xp = _reflect_pad1(xd)
    cols = np.empty((n, cin, 9, h, wd), dtype=xd.dtype)
    for t in range(9):
        dy, dx = divmod(t, 3)
        cols[:, :, t] = xp[:, :, dy:dy + h, dx:dx + wd]
    cols = cols.reshape(n, cin * 9, h * wd)
    w2 = w.data.reshape(cout, cin * 9)
    out = (w2 @ cols + b.data[:, None]).reshape(n, cout, h, wd)

    def backward(g):
        g2 = g.reshape(n, cout, h * wd)
        gw = None
        if w.requires_grad:
            gw = (g2 @ np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(w.shape)
        gb = g2.sum(axis=(0, 2)) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(n, cin, 9, h, wd)
            gp = np.zeros((n, cin, h + 2, wd + 2), dtype=g.dtype)
            for t in range(9):
                dy, dx = divmod(t, 3)
                gp[:, :, dy:dy + h, dx:dx + wd] += gcols[:, :, t]
            gx = _fold_reflect1(gp)
            if squeeze:
                gx = gx[0]
        return gx, gw, gb

    if squeeze:
        out = out[0]
    return make_result(out, (x, w, b), backward)
