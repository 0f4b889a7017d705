"""Differentiable primitives over :class:`Tensor`.

Each op computes its forward value with numpy and registers a closure
returning the gradient for every input.  Broadcasting follows numpy rules;
gradients are summed back to the input shape.
"""

from __future__ import annotations

import math

import numpy as np

from inklpose.errors import ConfigError, ShapeError
from inklpose.substrate.tensor import Tensor, add_flops, as_tensor, make_result

_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data + b.data
    add_flops("add", out.size)
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data - b.data
    add_flops("add", out.size)
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data * b.data
    add_flops("mul", out.size)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data / b.data
    add_flops("div", out.size)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    add_flops("pow", out.size)
    return make_result(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    add_flops("exp", out.size)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    add_flops("log", out.size)
    return make_result(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    add_flops("sqrt", out.size)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a: Tensor) -> Tensor:  # noqa: A001
    out = np.abs(a.data)
    return make_result(out, (a,), lambda g: (g * np.sign(a.data),), "abs")


def gelu(a: Tensor) -> Tensor:
    """Tanh-form GELU; smooth everywhere, which keeps finite-difference checks clean."""
    x = a.data
    inner = _GELU_C * x * (1.0 + 0.044715 * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)
    add_flops("gelu", 8 * out.size)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_result(out, (a,), bw, "gelu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    # log(1 + e^x) = max(x, 0) + log1p(e^-|x|), cheaper than logaddexp
    out = np.log1p(np.exp(-np.abs(x)))
    out += np.maximum(x, 0.0)
    add_flops("softplus", 4 * out.size)

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return (g * sig,)

    return make_result(out, (a,), bw, "softplus")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` else ``b``; ``mask`` is a constant."""
    a, b = _coerce(a, b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.where(mask, g, 0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(mask, 0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "where")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    add_flops("matmul", 2 * out.size * a.shape[-1])

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the trailing axis of ``x``."""
    x = as_tensor(x)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    add_flops("matmul", 2 * out.size * w.shape[0])
    out = out.reshape(lead + (w.shape[1],))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return make_result(out, parents, bw, "linear")


# -- reductions -------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    add_flops("sum", a.size)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum(a, axis, keepdims) * (1.0 / n)


def max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max over one axis; the gradient goes to the first (lowest index) maximiser."""
    a = as_tensor(a)
    axis = axis % a.ndim
    out = a.data.max(axis=axis, keepdims=True)
    n = a.shape[axis]
    if n <= 16:
        # short axes: mark the first maximiser slice by slice (avoids a strided argmax)
        mask = np.zeros(a.shape, dtype=bool)
        taken = np.zeros(out.shape, dtype=bool)
        for k in range(n):
            sl = (slice(None),) * axis + (slice(k, k + 1),)
            hit = (a.data[sl] == out) & ~taken
            mask[sl] = hit
            taken |= hit
    else:
        idx_k = np.expand_dims(np.argmax(a.data, axis=axis), axis)
        mask = np.zeros(a.shape, dtype=bool)
        np.put_along_axis(mask, idx_k, True, axis=axis)
    res = out if keepdims else np.squeeze(out, axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.where(mask, g, 0).astype(a.dtype, copy=False),)

    return make_result(res, (a,), bw, "max")


# -- shape manipulation -----------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return make_result(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    out = np.swapaxes(a.data, i, j)
    return make_result(out, (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def flip(a: Tensor, axis: int) -> Tensor:
    out = np.flip(a.data, axis).copy()
    return make_result(out, (a,), lambda g: (np.flip(g, axis).copy(),), "flip")


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()
    return make_result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, tuple(tensors), bw, "concat")


def index(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in the gradient."""
    out = a.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    basic = _is_basic_index(idx)

    def bw(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return make_result(out, (a,), bw, "index")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """``out[b, ...] = a[b, idx[b, ...]]`` for ``a`` of shape [B, N, C].

    ``idx`` has shape [B, ...]; the result has shape idx.shape + (C,).
    """
    bsz, n, c = a.shape
    idx = np.asarray(idx)
    if idx.shape[0] != bsz:
        raise ShapeError(f"gather_rows: batch {idx.shape[0]} != {bsz}")
    flat = (idx.reshape(bsz, -1) + (np.arange(bsz) * n)[:, None]).reshape(-1)
    src = a.data.reshape(bsz * n, c)
    out = src[flat].reshape(idx.shape + (c,))

    def bw(g):
        return (scatter_add_rows(g.reshape(-1, c), flat, bsz * n).reshape(a.shape),)

    return make_result(out, (a,), bw, "gather")


def scatter_add_rows(values: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """``out[rows[i]] += values[i]`` for a 2-D ``values``; repeated rows accumulate."""
    out = np.zeros((n, values.shape[1]), dtype=values.dtype)
    if len(rows) == 0:
        return out
    order = np.argsort(rows, kind="stable")
    srt = rows[order]
    starts = np.flatnonzero(np.r_[True, srt[1:] != srt[:-1]])
    out[srt[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def repeat(a: Tensor, repeats: int, axis: int) -> Tensor:
    out = np.repeat(a.data, repeats, axis=axis)
    axis = axis % a.ndim

    def bw(g):
        shp = a.shape[:axis] + (a.shape[axis], repeats) + a.shape[axis + 1:]
        return (g.reshape(shp).sum(axis=axis + 1),)

    return make_result(out, (a,), bw, "repeat")


# -- normalisation and attention -------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    add_flops("softmax", 4 * out.size)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), bw, "softmax")


def normalize(a: Tensor, axes, eps: float, use_std: bool = False) -> Tensor:
    """Zero-mean, unit-scale over ``axes``.

    ``use_std=False``: divide by sqrt(var + eps) (layer-norm form).
    ``use_std=True``: divide by (std + eps).
    """
    axes = _norm_axis(axes, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    if use_std:
        std = np.sqrt(var)
        denom = std + eps
    else:
        denom = np.sqrt(var + eps)
    out = xc / denom
    add_flops("norm", 6 * out.size)

    def bw(g):
        if use_std:
            # d out / d x via denom = std + eps, d std / d x = xc / (n std)
            safe_std = np.where(std > 0, std, 1.0)
            gd = -(g * xc).sum(axis=axes, keepdims=True) / denom ** 2
            gx = g / denom + gd * np.where(std > 0, xc / (n * safe_std), 0.0)
        else:
            gd = -(g * xc).sum(axis=axes, keepdims=True) / denom ** 2
            gx = g / denom + gd * xc / (n * denom)
        gx = gx - gx.mean(axis=axes, keepdims=True)
        return (gx,)

    return make_result(out, (a,), bw, "normalize")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return normalize(x, -1, eps) * gamma + beta


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params: dict, heads: int,
                         value_input: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention with input and output projections.

    ``q`` [..., Lq, d]; ``k``, ``v`` [..., Lk, d].  ``params`` holds
    ``wq, bq, wk, bk, wv, bv, wo, bo``.
    """
    d = q.shape[-1]
    if d % heads:
        raise ConfigError(f"model width {d} not divisible by {heads} heads")
    dh = d // heads
    qp = linear(q, params["wq"], params["bq"])
    kp = linear(k, params["wk"], params["bk"])
    vp = linear(v, params["wv"], params["bv"])

    def split(t):
        lead = t.shape[:-2]
        t = reshape(t, lead + (t.shape[-2], heads, dh))
        nd = t.ndim
        return swapaxes(t, nd - 3, nd - 2)

    qh, kh, vh = split(qp), split(kp), split(vp)
    scores = matmul(qh, swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, vh)
    nd = ctx.ndim
    ctx = swapaxes(ctx, nd - 3, nd - 2)
    ctx = reshape(ctx, ctx.shape[:-2] + (d,))
    return linear(ctx, params["wo"], params["bo"])


def smooth_l1(a: Tensor) -> Tensor:
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise (elementwise)."""
    x = a.data
    ax = np.abs(x)
    small = ax < 1.0
    out = np.where(small, 0.5 * x * x, ax - 0.5)
    return make_result(out, (a,), lambda g: (g * np.where(small, x, np.sign(x)),), "smooth_l1")


def norm(a: Tensor, axis=-1, eps: float = 0.0) -> Tensor:
    """Euclidean norm ``sqrt(sum(x^2) + eps)`` along ``axis``."""
    return sqrt(sum(a * a, axis=axis) + eps)


def l2norm(a: Tensor, axis=-1) -> Tensor:
    """Exact Euclidean norm along ``axis``; the gradient at a zero vector is zero."""
    val = np.sqrt((a.data * a.data).sum(axis=axis))
    add_flops("norm", 2 * a.size)

    def bw(g):
        safe = np.where(val > 0, val, 1.0)
        scale = np.where(val > 0, g / safe, 0.0)
        return (a.data * np.expand_dims(scale, axis),)

    return make_result(val, (a,), bw, "l2norm")


def cross(a: Tensor, b: Tensor) -> Tensor:
    """Cross product over a trailing axis of length 3."""
    a, b = _coerce(a, b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError(f"cross needs trailing dim 3, got {a.shape} and {b.shape}")
    out = np.cross(a.data, b.data)

    def bw(g):
        # d(a x b) . g = a . (b x g) = b . (g x a)
        ga = _unbroadcast(np.cross(b.data, g), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.cross(g, a.data), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "cross")
