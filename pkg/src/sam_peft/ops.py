"""
Differentiable primitives.

Each op computes its output with numpy, decides what to save for the backward pass
and hands both to `make_result`, which records only when an input is trainable.
Images and feature maps are HWC: (height, width, channels).
"""

from __future__ import annotations

import builtins
import math
from collections.abc import Sequence
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import ShapeError, TapeError
from .tensor import Array, DType, Tensor, make_result

Axis = int | tuple[int, ...] | None


def _lift(x: Tensor | float | Array, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), param_like=True)


def _check_float(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.dtype is DType.PACKED_U4:
            raise TapeError(f"{op}: packed-u4 tensors must be dequantized before use")
        if not t.dtype.is_float:
            raise TapeError(f"{op}: expected a floating tensor, got {t.dtype.name}")


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- elementwise arithmetic ---


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    ta, tb = _pair(a, b)
    _check_float("add", ta, tb)
    _broadcast_shape("add", ta, tb)

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        return (
            _unbroadcast(g, ta.shape) if needs[0] else None,
            _unbroadcast(g, tb.shape) if needs[1] else None,
        )

    return make_result("add", ta.data + tb.data, (ta, tb), (), backward)


def sub(a: Tensor | float, b: Tensor | float) -> Tensor:
    ta, tb = _pair(a, b)
    _check_float("sub", ta, tb)
    _broadcast_shape("sub", ta, tb)

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        return (
            _unbroadcast(g, ta.shape) if needs[0] else None,
            -_unbroadcast(g, tb.shape) if needs[1] else None,
        )

    return make_result("sub", ta.data - tb.data, (ta, tb), (), backward)


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    ta, tb = _pair(a, b)
    _check_float("mul", ta, tb)
    _broadcast_shape("mul", ta, tb)
    shape_a, shape_b = ta.shape, tb.shape
    # d/da reads b and d/db reads a; keep only what a trainable side needs.
    x = ta.data if tb.requires_grad else None
    y = tb.data if ta.requires_grad else None

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        ga = _unbroadcast(g * y, shape_a) if needs[0] and y is not None else None
        gb = _unbroadcast(g * x, shape_b) if needs[1] and x is not None else None
        return ga, gb

    saved = tuple(s for s in (x, y) if s is not None)
    return make_result("mul", ta.data * tb.data, (ta, tb), saved, backward)


def div(a: Tensor | float, b: Tensor | float) -> Tensor:
    ta, tb = _pair(a, b)
    _check_float("div", ta, tb)
    _broadcast_shape("div", ta, tb)
    shape_a, shape_b = ta.shape, tb.shape
    x = ta.data if tb.requires_grad else None
    y = tb.data

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        ga = _unbroadcast(g / y, shape_a) if needs[0] else None
        gb = _unbroadcast(-g * x / (y * y), shape_b) if needs[1] and x is not None else None
        return ga, gb

    saved = (y,) if x is None else (x, y)
    return make_result("div", ta.data / y, (ta, tb), saved, backward)


def neg(a: Tensor) -> Tensor:
    _check_float("neg", a)
    return make_result("neg", -a.data, (a,), (), lambda g, needs: (-g,))


def _pair(a: Tensor | float, b: Tensor | float) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    if isinstance(b, Tensor):
        return _lift(a, b), b
    raise TypeError("at least one operand must be a Tensor")


# --- linear algebra ---


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_float("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims") from None
    x, w = a.data, b.data

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        ga = _unbroadcast(g @ np.swapaxes(w, -1, -2), a.shape) if needs[0] else None
        gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, b.shape) if needs[1] else None
        return ga, gb

    return make_result("matmul", x @ w, (a, b), (x, w), backward)


# --- convolutions (HWC activations, kernels laid out (kh, kw, c_in, c_out)) ---


def _im2col(xp: Array, kh: int, kw: int, stride: int) -> Array:
    windows = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    # (Ho, Wo, C, kh, kw) -> (Ho, Wo, kh, kw, C)
    return windows.transpose(0, 1, 3, 4, 2)


def conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, *, stride: int = 1, padding: int = 0
) -> Tensor:
    inputs = (x, weight) if bias is None else (x, weight, bias)
    _check_float("conv2d", *inputs)
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[2] != x.shape[2]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[3],):
        raise ShapeError("conv2d", weight.shape, bias.shape, detail="bias")
    kh, kw, c_in, c_out = weight.shape
    h, w_, _ = x.shape
    if h + 2 * padding < kh or w_ + 2 * padding < kw:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than input")

    xp = x.data if padding == 0 else np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
    cols = _im2col(xp, kh, kw, stride)
    ho, wo = cols.shape[:2]
    w_flat = weight.data.reshape(kh * kw * c_in, c_out)
    out = (cols.reshape(ho * wo, -1) @ w_flat).reshape(ho, wo, c_out)
    if bias is not None:
        out = out + bias.data

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        g_flat = g.reshape(ho * wo, c_out)
        gx = gw = gb = None
        if needs[0]:
            gcols = (g_flat @ w_flat.T).reshape(ho, wo, kh, kw, c_in)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                        gcols[:, :, i, j, :]
                    )
            gx = dxp[padding : padding + h, padding : padding + w_]
        if needs[1]:
            cols_again = _im2col(xp, kh, kw, stride).reshape(ho * wo, -1)
            gw = (cols_again.T @ g_flat).reshape(weight.shape)
        if bias is not None and needs[2]:
            gb = g.sum(axis=(0, 1))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result("conv2d", out, inputs, (xp, weight.data), backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *, stride: int = 2) -> Tensor:
    inputs = (x, weight) if bias is None else (x, weight, bias)
    _check_float("conv_transpose2d", *inputs)
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[2] != x.shape[2]:
        raise ShapeError("conv_transpose2d", x.shape, weight.shape)
    kh, kw, c_in, c_out = weight.shape
    h, w_, _ = x.shape
    ho, wo = (h - 1) * stride + kh, (w_ - 1) * stride + kw
    w_flat = weight.data.transpose(2, 0, 1, 3).reshape(c_in, kh * kw * c_out)
    cols = (x.data.reshape(h * w_, c_in) @ w_flat).reshape(h, w_, kh, kw, c_out)
    out = np.zeros((ho, wo, c_out), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w_ - 1) + 1 : stride] += cols[:, :, i, j, :]
    if bias is not None:
        out += bias.data

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        gcols = np.empty((h, w_, kh, kw, c_out), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gcols[:, :, i, j, :] = g[i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w_ - 1) + 1 : stride]
        gcols_flat = gcols.reshape(h * w_, kh * kw * c_out)
        gx = (gcols_flat @ w_flat.T).reshape(x.shape) if needs[0] else None
        gw = None
        if needs[1]:
            gw = (x.data.reshape(h * w_, c_in).T @ gcols_flat).reshape(c_in, kh, kw, c_out).transpose(1, 2, 0, 3)
        gb = g.sum(axis=(0, 1)) if bias is not None and needs[2] else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result("conv_transpose2d", out, inputs, (x.data, weight.data), backward)


# --- normalisation and activations ---


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    _check_float("layer_norm", x, weight, bias)
    if weight.shape != (x.shape[-1],) or bias.shape != weight.shape:
        raise ShapeError("layer_norm", x.shape, weight.shape)
    mean_ = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean_) * rstd
    gamma = weight.data
    out = xhat * gamma + bias.data
    reduce_axes = tuple(range(x.ndim - 1))

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        gx = None
        if needs[0]:
            dxhat = g * gamma
            gx = rstd * (
                dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        gw = (g * xhat).sum(axis=reduce_axes) if needs[1] else None
        gb = g.sum(axis=reduce_axes) if needs[2] else None
        return gx, gw, gb

    return make_result("layer_norm", out, (x, weight, bias), (xhat, rstd, gamma), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_float("softmax", x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", y, (x,), (y,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    _check_float("gelu", x)
    v = x.data
    cdf = 0.5 * (1.0 + special.erf(v * _INV_SQRT2))
    out = (v * cdf).astype(v.dtype, copy=False)

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        c = 0.5 * (1.0 + special.erf(v * _INV_SQRT2))
        pdf = np.exp(-0.5 * v * v) * _INV_SQRT2PI
        return ((g * (c + v * pdf)).astype(v.dtype, copy=False),)

    return make_result("gelu", out, (x,), (v,), backward)


def relu(x: Tensor) -> Tensor:
    _check_float("relu", x)
    mask = x.data > 0

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        return (g * mask,)

    return make_result("relu", x.data * mask, (x,), (mask,), backward)


def sigmoid(x: Tensor) -> Tensor:
    _check_float("sigmoid", x)
    y = special.expit(x.data)

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        return (g * y * (1.0 - y),)

    return make_result("sigmoid", y, (x,), (y,), backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    _check_float("softplus", x)
    v = x.data
    out = np.logaddexp(np.zeros((), dtype=v.dtype), v)

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        return (g * special.expit(v),)

    return make_result("softplus", out, (x,), (v,), backward)


# --- shape manipulation ---


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], tuple | list):
        shape = tuple(shape[0])
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return make_result("reshape", out, (x,), (), lambda g, needs: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    perm = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(perm) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, perm, detail="axes must be a permutation")
    inverse = tuple(int(i) for i in np.argsort(perm))
    return make_result("transpose", x.data.transpose(perm), (x,), (), lambda g, needs: (g.transpose(inverse),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    target = tuple(shape)
    try:
        out = np.broadcast_to(x.data, target)
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, target) from None
    return make_result("broadcast_to", out, (x,), (), lambda g, needs: (_unbroadcast(g, x.shape),))


def _is_basic_index(key: Any) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, int | slice) or k is None or k is Ellipsis for k in parts)


def getitem(x: Tensor, key: Any) -> Tensor:
    out = x.data[key]
    if np.ndim(out) == 0:
        out = np.asarray(out)
    basic = _is_basic_index(key)

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        gx = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return make_result("getitem", out, (x,), (), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat", (), detail="nothing to concatenate")
    _check_float("concat", *tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        parts = np.split(g, splits, axis=axis)
        return tuple(p if need else None for p, need in zip(parts, needs, strict=True))

    return make_result("concat", out, tuple(tensors), (), backward)


# --- reductions ---


def _expand(g: Array, shape: tuple[int, ...], axis: Axis, keepdims: bool) -> Array:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    _check_float("sum", x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        return (_expand(g, x.shape, axis, keepdims),)

    return make_result("sum", out, (x,), (), backward)


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    _check_float("mean", x)
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size // builtins.max(out.size, 1) if axis is not None else x.size

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        return (_expand(g, x.shape, axis, keepdims) / count,)

    return make_result("mean", out, (x,), (), backward)


def max(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    _check_float("max", x)
    kept = x.data.max(axis=axis, keepdims=True)
    out = np.asarray(kept if keepdims else x.data.max(axis=axis, keepdims=False))

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        hit = x.data == kept
        share = hit / hit.sum(axis=axis, keepdims=True)
        return (_expand(g, x.shape, axis, keepdims) * share,)

    return make_result("max", out, (x,), (x.data, kept), backward)


# --- resampling ---


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    _check_float("upsample_nearest", x)
    if x.ndim != 3 or factor < 1:
        raise ShapeError("upsample_nearest", x.shape, detail=f"factor {factor}")
    h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=0), factor, axis=1)

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        return (g.reshape(h, factor, w, factor, c).sum(axis=(1, 3)),)

    return make_result("upsample_nearest", out, (x,), (), backward)


def _interp_matrix(n_out: int, n_in: int, dtype: np.dtype[Any]) -> Array:
    # Half-pixel centres, edges clamped.
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    _check_float("upsample_bilinear", x)
    if x.ndim != 3:
        raise ShapeError("upsample_bilinear", x.shape, detail="expected (H, W, C)")
    ry = _interp_matrix(size[0], x.shape[0], x.data.dtype)
    rx = _interp_matrix(size[1], x.shape[1], x.data.dtype)
    out = np.einsum("Hh,hwc->Hwc", ry, x.data)
    out = np.einsum("Ww,Hwc->HWc", rx, out)

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        gy = np.einsum("Ww,HWc->Hwc", rx, g)
        return (np.einsum("Hh,Hwc->hwc", ry, gy),)

    return make_result("upsample_bilinear", out, (x,), (), backward)


# --- stochastic ---


def dropout(x: Tensor, p: float, rng: np.random.Generator, *, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or when p == 0."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError(f"dropout probability must be < 1, got {p}")
    _check_float("dropout", x)
    mask = ((rng.random(x.shape) >= p) / (1.0 - p)).astype(x.data.dtype)

    def backward(g: Array, needs: tuple[bool, ...]) -> tuple[Array | None, ...]:
        return (g * mask,)

    return make_result("dropout", x.data * mask, (x,), (mask,), backward)
