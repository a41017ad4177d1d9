"""
Symmetric 4-bit block quantization for frozen linear weights.

A block of values is stored as its absmax (f32) and one signed code per value,
q = clamp(round(v / (absmax / 7)), -8, 7), kept as the nibble q + 8.
"""

from __future__ import annotations

import math
from typing import Any

import numpy as np

from . import ops
from .errors import NumericalError, ShapeError
from .nn import Linear, Module
from .tensor import Array, DType, Tensor, packed_length

QMIN, QMAX = -8, 7
_OFFSET = 8


def pack_nibbles(codes: Array) -> Array:
    """Two unsigned 4-bit codes per byte, low nibble first."""
    u = np.asarray(codes, dtype=np.uint8)
    if u.size % 2:
        u = np.concatenate([u, np.zeros(1, dtype=np.uint8)])
    return (u[0::2] | (u[1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed: Array, count: int) -> Array:
    p = np.asarray(packed, dtype=np.uint8)
    out = np.empty(p.size * 2, dtype=np.uint8)
    out[0::2] = p & 0x0F
    out[1::2] = p >> 4
    return out[:count]


def _codes(values: Array, absmax: float) -> Array:
    if absmax == 0.0:
        return np.zeros(values.shape, dtype=np.int8)
    scale = np.float64(absmax) / QMAX
    return np.clip(np.rint(values.astype(np.float64) / scale), QMIN, QMAX).astype(np.int8)


def quantize_block(values: Array) -> tuple[Array, np.float32]:
    """Quantize one block; returns (packed codes, absmax)."""
    v = np.asarray(values, dtype=np.float32).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise NumericalError("cannot quantize non-finite values")
    absmax = np.float32(np.abs(v).max()) if v.size else np.float32(0.0)
    codes = _codes(v, float(absmax))
    return pack_nibbles(codes.astype(np.int16) + _OFFSET), absmax


def dequantize_block(packed: Array, absmax: float, count: int) -> Array:
    q = unpack_nibbles(packed, count).astype(np.int16) - _OFFSET
    return ((q.astype(np.float64) * np.float64(absmax)) / QMAX).astype(np.float32)


def quantize_array(weight: Array, block: int) -> tuple[Array, Array]:
    """Quantize a whole tensor in row-major blocks of `block` elements (the last may be shorter)."""
    flat = np.asarray(weight, dtype=np.float32).reshape(-1)
    if not np.all(np.isfinite(flat)):
        raise NumericalError("cannot quantize non-finite weights")
    n_blocks = math.ceil(flat.size / block)
    padded = np.zeros(n_blocks * block, dtype=np.float32)
    padded[: flat.size] = flat
    blocks = padded.reshape(n_blocks, block)
    absmax = np.abs(blocks).max(axis=1).astype(np.float32)
    scale = absmax.astype(np.float64) / QMAX
    safe = np.where(scale == 0.0, 1.0, scale)
    codes = np.clip(np.rint(blocks.astype(np.float64) / safe[:, None]), QMIN, QMAX)
    codes[scale == 0.0] = 0
    u = (codes.astype(np.int16) + _OFFSET).reshape(-1)[: flat.size]
    return pack_nibbles(u), absmax


def dequantize_array(
    packed: Array, absmax: Array, shape: tuple[int, ...], block: int, dtype: np.dtype[Any] = np.dtype(np.float32)
) -> Array:
    n = math.prod(shape)
    n_blocks = math.ceil(n / block)
    if absmax.shape != (n_blocks,):
        raise ShapeError("dequantize", absmax.shape, (n_blocks,), detail="one scale per block")
    q = unpack_nibbles(packed, n).astype(np.float64) - _OFFSET
    scales = np.repeat(absmax.astype(np.float64), block)[:n]
    return ((q * scales) / QMAX).astype(np.float32).astype(dtype).reshape(shape)


class QuantizedLinear(Module):
    """Frozen 4-bit linear; the weight is dequantized on every forward."""

    def __init__(self, linear: Linear, *, block: int = 64, materialize: bool = True) -> None:
        self.d_in, self.d_out = linear.d_in, linear.d_out
        self.block = block
        self.compute_dtype = linear.weight.data.dtype
        shape = (linear.d_in, linear.d_out)
        if materialize:
            packed, absmax = quantize_array(linear.weight.data, block)
        else:
            # Count-only models: correctly sized, never read.
            packed = np.zeros(packed_length(shape), dtype=np.uint8)
            absmax = np.zeros(math.ceil(math.prod(shape) / block), dtype=np.float32)
        self.qweight = Tensor(packed, dtype=DType.PACKED_U4, shape=shape, name="qweight")
        self.absmax = Tensor(absmax, dtype=DType.F32, name="absmax")
        self.bias = linear.bias
        if self.bias is not None:
            self.bias.requires_grad = False
        self.adapter: Module | None = linear.adapter

    @property
    def quantized_bytes(self) -> int:
        return self.qweight.nbytes + self.absmax.nbytes

    @property
    def weight_elements(self) -> int:
        return self.d_in * self.d_out

    def dequantized_weight(self) -> Tensor:
        w = dequantize_array(self.qweight.data, self.absmax.data, self.qweight.shape, self.block, self.compute_dtype)
        return Tensor(w, param_like=True)

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.dequantized_weight())
        if self.bias is not None:
            y = y + self.bias
        if self.adapter is not None:
            y = y + self.adapter(x)
        return y
