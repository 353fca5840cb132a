"""Differentiable primitives.

Elementwise ops require identical shapes; the only implicit broadcast is the
bias in :func:`linear` and :func:`conv1d`. Use :func:`broadcast_to` and
:func:`reshape` to line shapes up explicitly.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import ConfigError, NumericError, ShapeError
from .core import Array, record

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _same_shape(name: str, a: Array, b: Array) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------- #
# elementwise
# --------------------------------------------------------------------------- #


def add(a: Array, b: Array) -> Array:
    _same_shape("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Array, b: Array) -> Array:
    _same_shape("sub", a, b)
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Array, b: Array) -> Array:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Array, c: float) -> Array:
    return record("scale", (a,), a.data * c, lambda g: (g * c,))


def add_scalar(a: Array, c: float) -> Array:
    return record("add_scalar", (a,), a.data + c, lambda g: (g,))


def square(a: Array) -> Array:
    ad = a.data
    return record("square", (a,), ad * ad, lambda g: (2.0 * g * ad,))


def sqrt(a: Array) -> Array:
    out = np.sqrt(a.data)
    return record("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def exp(a: Array) -> Array:
    out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * out,))


def sin(a: Array) -> Array:
    ad = a.data
    return record("sin", (a,), np.sin(ad), lambda g: (g * np.cos(ad),))


def cos(a: Array) -> Array:
    ad = a.data
    return record("cos", (a,), np.cos(ad), lambda g: (-g * np.sin(ad),))


def relu(a: Array) -> Array:
    mask = a.data > 0
    return record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def silu(a: Array) -> Array:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    return record("silu", (a,), x * sig, lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))


def gelu(a: Array) -> Array:
    """tanh-approximated GELU."""
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return record("gelu", (a,), out, vjp)


# --------------------------------------------------------------------------- #
# shape manipulation
# --------------------------------------------------------------------------- #


def reshape(a: Array, shape: Sequence[int]) -> Array:
    src = a.shape
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a: Array, axes: Sequence[int]) -> Array:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def broadcast_to(a: Array, shape: Sequence[int]) -> Array:
    shape = tuple(shape)
    if a.ndim != len(shape):
        raise ShapeError(f"broadcast_to: rank {a.ndim} vs target {shape}; reshape first")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    for i in axes:
        if a.shape[i] != 1:
            raise ShapeError(f"broadcast_to: axis {i} has size {a.shape[i]}, cannot expand to {shape[i]}")
    out = np.broadcast_to(a.data, shape)
    return record("broadcast_to", (a,), out, lambda g: (g.sum(axis=axes, keepdims=True),))


def concat(arrays: Sequence[Array], axis: int = 0) -> Array:
    arrays = tuple(arrays)
    sizes = [x.shape[axis] for x in arrays]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", arrays, np.concatenate([x.data for x in arrays], axis=axis), vjp)


def stack(arrays: Sequence[Array], axis: int = 0) -> Array:
    arrays = tuple(arrays)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(arrays)))

    return record("stack", arrays, np.stack([x.data for x in arrays], axis=axis), vjp)


def index(a: Array, key) -> Array:
    """Basic or advanced indexing; the adjoint scatters back with ``np.add.at``."""
    src_shape = a.shape
    out = np.asarray(a.data[key])

    def vjp(g):
        full = np.zeros(src_shape)
        np.add.at(full, key, g)
        return (full,)

    return record("index", (a,), out, vjp)


def upsample_nearest(a: Array, factor: int = 2) -> Array:
    """Repeat every element along the last axis ``factor`` times."""
    out = np.repeat(a.data, factor, axis=-1)

    def vjp(g):
        return (g.reshape(*g.shape[:-1], -1, factor).sum(axis=-1),)

    return record("upsample_nearest", (a,), out, vjp)


# --------------------------------------------------------------------------- #
# reductions
# --------------------------------------------------------------------------- #


def sum(a: Array, axis=None, keepdims: bool = False) -> Array:  # noqa: A001
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return record("sum", (a,), out, vjp)


def mean(a: Array, axis=None, keepdims: bool = False) -> Array:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def norm(a: Array, axis: int = -1) -> Array:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as 0."""
    ad = a.data
    n = np.sqrt((ad * ad).sum(axis=axis))

    def vjp(g):
        nk = np.expand_dims(n, axis)
        safe = np.where(nk > 0, nk, 1.0)
        return (np.where(nk > 0, ad / safe, 0.0) * np.expand_dims(g, axis),)

    return record("norm", (a,), n, vjp)


# --------------------------------------------------------------------------- #
# layers
# --------------------------------------------------------------------------- #


def matmul(a: Array, b: Array) -> Array:
    """Batched matrix product; batch dims must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return record("matmul", (a, b), ad @ bd, vjp)


def linear(x: Array, weight: Array, bias: Array | None = None) -> Array:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input last dim {x.shape[-1]} vs weight {weight.shape} (axis 1)")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight rows {weight.shape[0]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    lead = tuple(range(xd.ndim - 1))

    def vjp(g):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        gb = g.sum(axis=lead) if lead else g
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("linear", inputs, out, vjp)


def conv1d(
    x: Array, weight: Array, bias: Array | None = None, padding: int | None = None, stride: int = 1
) -> Array:
    """Cross-correlation over the last axis.

    ``x`` is ``[C_in, T]`` or ``[B, C_in, T]``; ``weight`` is ``[C_out, C_in, K]``.
    With the default ``padding=(K-1)//2`` and ``stride=1`` the length is kept.
    """
    if weight.ndim != 3:
        raise ShapeError(f"conv1d: weight must be [C_out, C_in, K], got {weight.shape}")
    c_out, c_in, k = weight.shape
    if x.ndim not in (2, 3) or x.shape[-2] != c_in:
        raise ShapeError(f"conv1d: input channel axis {x.shape[-2:-1]} vs weight C_in={c_in} (axis 1)")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias {bias.shape} vs C_out={c_out}")
    if padding is None:
        if k % 2 == 0:
            raise ConfigError(f"conv1d: kernel size must be odd for same padding, got {k}")
        padding = (k - 1) // 2

    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    b, _, t = xd.shape
    t_out = (t + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise ShapeError(f"conv1d: input length {t} too short for kernel {k}")
    span = (t_out - 1) * stride + 1
    # work in [C, B, T] so that batch folds into the GEMM's column axis
    xc = xd.transpose(1, 0, 2)
    xp = np.pad(xc, ((0, 0), (0, 0), (padding, padding))) if padding else np.ascontiguousarray(xc)
    cols = np.stack([xp[:, :, j : j + span : stride] for j in range(k)], axis=1).reshape(c_in * k, b * t_out)
    wm = weight.data.reshape(c_out, c_in * k)
    out = wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(c_out, b, t_out).transpose(1, 0, 2))
    if unbatched:
        out = out[0]

    def vjp(g):
        g3 = g[None] if unbatched else g
        g2 = np.ascontiguousarray(g3.transpose(1, 0, 2)).reshape(c_out, b * t_out)
        gw = (g2 @ cols.T).reshape(c_out, c_in, k)
        dcols = (wm.T @ g2).reshape(c_in, k, b, t_out)
        dxp = np.zeros(xp.shape)
        for j in range(k):
            dxp[:, :, j : j + span : stride] += dcols[:, j]
        dx = dxp[:, :, padding : padding + t] if padding else dxp
        dx = np.ascontiguousarray(dx.transpose(1, 0, 2))
        if unbatched:
            dx = dx[0]
        grads = [dx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv1d", inputs, out, vjp)


def _normalize(xg: np.ndarray, axis, eps: float):
    mu = xg.mean(axis=axis, keepdims=True)
    var = xg.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (xg - mu) * inv, inv


def _normalize_vjp(dxhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axis) -> np.ndarray:
    return inv * (
        dxhat - dxhat.mean(axis=axis, keepdims=True) - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
    )


def group_norm(x: Array, groups: int, gamma: Array, beta: Array, eps: float = 1e-5) -> Array:
    """Group normalization of ``[C, T]`` or ``[B, C, T]`` input."""
    c = x.shape[-2]
    if groups < 1 or c % groups:
        raise ConfigError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    b, _, t = xd.shape
    xg = xd.reshape(b, groups, -1)
    xhat_g, inv = _normalize(xg, -1, eps)
    xhat = xhat_g.reshape(b, c, t)
    gd = gamma.data[:, None]
    out = xhat * gd + beta.data[:, None]
    if unbatched:
        out = out[0]

    def vjp(g):
        g3 = g[None] if unbatched else g
        dgamma = (g3 * xhat).sum(axis=(0, 2))
        dbeta = g3.sum(axis=(0, 2))
        dxhat = (g3 * gd).reshape(b, groups, -1)
        dx = _normalize_vjp(dxhat, xhat_g, inv, -1).reshape(b, c, t)
        return (dx[0] if unbatched else dx), dgamma, dbeta

    return record("group_norm", (x, gamma, beta), out, vjp)


def layer_norm(x: Array, gamma: Array, beta: Array, eps: float = 1e-5) -> Array:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({d},), got {gamma.shape}/{beta.shape}")
    xhat, inv = _normalize(x.data, -1, eps)
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        dxhat = g * gamma.data
        return _normalize_vjp(dxhat, xhat, inv, -1), (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", (x, gamma, beta), out, vjp)


def softmax(a: Array, axis: int = -1) -> Array:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return record("softmax", (a,), p, vjp)


def attention(q: Array, k: Array, v: Array) -> Array:
    """Full scaled dot-product attention ``softmax(q k^T / sqrt(D)) v`` over ``[..., T, D]``."""
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} must match")
    qd, kd, vd = q.data, k.data, v.data
    s = 1.0 / math.sqrt(q.shape[-1])
    logits = (qd @ np.swapaxes(kd, -1, -2)) * s
    if not np.all(np.isfinite(logits)):
        raise NumericError("attention: non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = p @ vd

    def vjp(g):
        dv = np.swapaxes(p, -1, -2) @ g
        dp = g @ np.swapaxes(vd, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * s
        return ds @ kd, np.swapaxes(ds, -1, -2) @ qd, dv

    return record("attention", (q, k, v), out, vjp)
