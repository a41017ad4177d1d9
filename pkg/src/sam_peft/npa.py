"""
NPA1: the single-tensor file format used for images and label maps.

    b"NPA1" | dtype code (u8) | ndim (u8) | ndim x u32 extents | payload

All integers and payload values are little-endian; packed-u4 payloads hold two
elements per byte, low nibble first.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .tensor import Array, DType, Tensor, packed_length

MAGIC = b"NPA1"


def encode(tensor: Tensor) -> bytes:
    header = MAGIC + struct.pack("<BB", int(tensor.dtype), tensor.ndim)
    header += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
    if tensor.dtype is DType.PACKED_U4:
        payload = np.ascontiguousarray(tensor.data, dtype=np.uint8).tobytes()
    else:
        payload = np.ascontiguousarray(tensor.data, dtype=tensor.dtype.numpy.newbyteorder("<")).tobytes()
    return header + payload


def decode(blob: bytes, *, source: str = "<bytes>") -> Tensor:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise DataError(f"{source}: not an NPA1 file (bad magic)")
    code, ndim = struct.unpack_from("<BB", blob, 4)
    try:
        dtype = DType(code)
    except ValueError:
        raise DataError(f"{source}: unknown dtype code {code}") from None
    offset = 6 + 4 * ndim
    if len(blob) < offset:
        raise DataError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{ndim}I", blob, 6)
    if any(s == 0 for s in shape):
        raise DataError(f"{source}: zero extent in shape {shape}")

    payload = blob[offset:]
    if dtype is DType.PACKED_U4:
        expected = packed_length(shape)
        if len(payload) != expected:
            raise DataError(f"{source}: payload is {len(payload)} bytes, expected {expected}")
        return Tensor(np.frombuffer(payload, dtype=np.uint8).copy(), dtype=dtype, shape=shape)

    np_dtype = dtype.numpy.newbyteorder("<")
    expected = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
    if len(payload) != expected:
        raise DataError(f"{source}: payload is {len(payload)} bytes, expected {expected}")
    arr: Array = np.frombuffer(payload, dtype=np_dtype).reshape(shape).astype(dtype.numpy)
    return Tensor(arr, dtype=dtype)


def save_npa(path: Path, value: Tensor | Array) -> None:
    tensor = value if isinstance(value, Tensor) else Tensor(value, dtype=DType.from_numpy(value.dtype))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(tensor))


def load_npa(path: Path) -> Tensor:
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing data file: {path}") from None
    return decode(blob, source=str(path))
