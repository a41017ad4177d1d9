"""
PSAMCKPT: the model container.

    b"PSAMCKPT" | version (u32) | header_len (u64) | JSON header | payload

The header is compact JSON with sorted keys holding the experiment config echo, a
tensor index (name, dtype code, shape, byte offset and length into the payload,
plus block size and scale offset for 4-bit weights) and free-form run metadata.
Tensors are laid out back to back in index order, so save -> load -> save
reproduces the same bytes.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DataError, ShapeError
from .nn import Module
from .quant import QuantizedLinear
from .tensor import DType, Tensor, packed_length

logger = logging.getLogger(__name__)

MAGIC = b"PSAMCKPT"
VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    config: dict[str, Any]
    tensors: dict[str, Tensor]
    meta: dict[str, Any] = field(default_factory=lambda: {})
    # qweight tensor name -> quantization block size
    quant_blocks: dict[str, int] = field(default_factory=lambda: {})

    @classmethod
    def from_model(
        cls, model: Module, config: dict[str, Any], meta: dict[str, Any] | None = None
    ) -> Checkpoint:
        quant = {
            f"{name}.qweight": m.block for name, m in model.named_modules() if isinstance(m, QuantizedLinear)
        }
        return cls(config=config, tensors=snapshot(model), meta=dict(meta or {}), quant_blocks=quant)


def _payload(t: Tensor) -> bytes:
    if t.dtype is DType.PACKED_U4:
        return np.ascontiguousarray(t.data, dtype=np.uint8).tobytes()
    return np.ascontiguousarray(t.data, dtype=t.dtype.numpy.newbyteorder("<")).tobytes()


def _expected_bytes(dtype: DType, shape: tuple[int, ...]) -> int:
    if dtype is DType.PACKED_U4:
        return packed_length(shape)
    return int(np.prod(shape, dtype=np.int64)) * dtype.numpy.itemsize


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    index: list[dict[str, Any]] = []
    chunks: list[bytes] = []
    offsets: dict[str, int] = {}
    offset = 0
    for name in sorted(ckpt.tensors):
        raw = _payload(ckpt.tensors[name])
        offsets[name] = offset
        chunks.append(raw)
        t = ckpt.tensors[name]
        index.append(
            {"name": name, "dtype": int(t.dtype), "shape": list(t.shape), "offset": offset, "length": len(raw)}
        )
        offset += len(raw)
    for entry in index:
        block = ckpt.quant_blocks.get(entry["name"])
        if block is not None:
            scale = entry["name"].removesuffix(".qweight") + ".absmax"
            if scale not in offsets:
                raise DataError(f"quantized tensor {entry['name']} has no scale array {scale}")
            entry["quant"] = {"block": block, "scale": scale, "scale_offset": offsets[scale]}

    header = json.dumps(
        {"config": ckpt.config, "meta": ckpt.meta, "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=True,
        allow_nan=False,
    ).encode("ascii")
    return _PREAMBLE.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def decode_checkpoint(blob: bytes, *, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < _PREAMBLE.size:
        raise DataError(f"{source}: too short for a checkpoint")
    magic, version, header_len = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"{source}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    start = _PREAMBLE.size
    if start + header_len > len(blob):
        raise DataError(f"{source}: header runs past the end of the file")
    try:
        header = json.loads(blob[start : start + header_len].decode("ascii"))
        index: list[dict[str, Any]] = header["tensors"]
        config: dict[str, Any] = header["config"]
        meta: dict[str, Any] = header["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{source}: malformed header ({exc})") from None

    payload = memoryview(blob)[start + header_len :]
    tensors: dict[str, Tensor] = {}
    quant: dict[str, int] = {}
    end = 0
    for entry in sorted(index, key=lambda e: e["offset"]):
        name = entry["name"]
        offset, length = int(entry["offset"]), int(entry["length"])
        if offset < end:
            raise DataError(f"{source}: tensor {name} overlaps the previous one")
        if offset + length > len(payload):
            raise DataError(f"{source}: tensor {name} runs past the end of the file")
        try:
            dtype = DType(entry["dtype"])
        except ValueError:
            raise DataError(f"{source}: tensor {name} has unknown dtype code {entry['dtype']}") from None
        shape = tuple(int(s) for s in entry["shape"])
        if length != _expected_bytes(dtype, shape):
            raise DataError(f"{source}: tensor {name} has {length} bytes for shape {shape}")
        raw = bytes(payload[offset : offset + length])
        if dtype is DType.PACKED_U4:
            tensors[name] = Tensor(np.frombuffer(raw, dtype=np.uint8).copy(), dtype=dtype, shape=shape)
        else:
            arr = np.frombuffer(raw, dtype=dtype.numpy.newbyteorder("<")).reshape(shape).astype(dtype.numpy)
            tensors[name] = Tensor(arr, dtype=dtype)
        if "quant" in entry:
            quant[name] = int(entry["quant"]["block"])
        end = offset + length
    if end != len(payload):
        raise DataError(f"{source}: {len(payload) - end} trailing bytes after the last tensor")
    return Checkpoint(config=config, tensors=tensors, meta=meta, quant_blocks=quant)


def save_checkpoint(path: Path, ckpt: Checkpoint) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))
    logger.info("wrote checkpoint %s (%d tensors)", path, len(ckpt.tensors))
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing checkpoint: {path}") from None
    return decode_checkpoint(blob, source=str(path))


# --- model state ---


def load_state(model: Module, tensors: dict[str, Tensor]) -> None:
    """Copy stored values into the model; names, dtypes and shapes must match exactly."""
    own = dict(model.named_tensors())
    missing = sorted(set(own) - set(tensors))
    unexpected = sorted(set(tensors) - set(own))
    if missing or unexpected:
        raise DataError(
            f"checkpoint does not match the model: missing {missing[:5]}, unexpected {unexpected[:5]}"
        )
    for name, target in own.items():
        stored = tensors[name]
        if stored.shape != target.shape or stored.dtype is not target.dtype:
            raise ShapeError(
                "load_state", stored.shape, target.shape, detail=f"{name}: {stored.dtype.name} vs {target.dtype.name}"
            )
        target.data = stored.data.copy()


def snapshot(model: Module) -> dict[str, Tensor]:
    return {name: Tensor(t.data.copy(), dtype=t.dtype, shape=t.shape) for name, t in model.named_tensors()}
