from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from sam_peft.checkpoint import (
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_state,
    save_checkpoint,
)
from sam_peft.errors import DataError, ShapeError
from sam_peft.peft import PeftConfig, apply_peft
from sam_peft.tensor import DType, Tensor

from .conftest import TinyFactory


def _small() -> Checkpoint:
    tensors = {
        "a": Tensor(np.arange(4, dtype=np.float32), dtype=DType.F32),
        "b": Tensor(np.ones((2, 3), dtype=np.float64), dtype=DType.F64),
    }
    return Checkpoint(config={"method": "ssf"}, tensors=tensors, meta={"epoch": 2})


def _split(blob: bytes) -> tuple[dict[str, Any], bytes]:
    _, _, header_len = struct.unpack_from("<8sIQ", blob)
    header = json.loads(blob[20 : 20 + header_len])
    return header, blob[20 + header_len :]


def _join(header: dict[str, Any], payload: bytes) -> bytes:
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("ascii")
    return struct.pack("<8sIQ", b"PSAMCKPT", 1, len(raw)) + raw + payload


def test_layout_of_a_small_checkpoint() -> None:
    blob = encode_checkpoint(_small())
    assert blob[:8] == b"PSAMCKPT"
    header, payload = _split(blob)
    assert [e["name"] for e in header["tensors"]] == ["a", "b"]
    assert header["tensors"][1]["offset"] == 16
    assert len(payload) == 16 + 48
    assert header["meta"] == {"epoch": 2}


def test_model_round_trip_is_byte_identical(tiny_model: TinyFactory, tmp_path: Path) -> None:
    model = tiny_model(seed=1)
    ckpt = Checkpoint.from_model(model, {"preset": "custom"}, {"best_score": 0.25})
    path = save_checkpoint(tmp_path / "ckpt" / "model.psam", ckpt)
    loaded = load_checkpoint(path)
    assert encode_checkpoint(loaded) == path.read_bytes()
    assert loaded.meta == {"best_score": 0.25}

    fresh = tiny_model(seed=2)
    load_state(fresh, loaded.tensors)
    own = dict(model.named_tensors())
    for name, t in fresh.named_tensors():
        np.testing.assert_array_equal(t.data, own[name].data)


def test_quantized_weights_round_trip(tiny_model: TinyFactory) -> None:
    model = tiny_model()
    apply_peft(model, PeftConfig.create(method="qlora", rank=4))
    ckpt = Checkpoint.from_model(model, {"method": "qlora"})
    assert ckpt.quant_blocks
    assert all(block == 64 for block in ckpt.quant_blocks.values())
    back = decode_checkpoint(encode_checkpoint(ckpt))
    assert back.quant_blocks == ckpt.quant_blocks
    for name in ckpt.quant_blocks:
        assert back.tensors[name].dtype is DType.PACKED_U4
        assert back.tensors[name].shape == ckpt.tensors[name].shape
        np.testing.assert_array_equal(back.tensors[name].data, ckpt.tensors[name].data)
    header, _ = _split(encode_checkpoint(ckpt))
    quant = [e for e in header["tensors"] if "quant" in e]
    assert len(quant) == len(ckpt.quant_blocks)
    offsets = {e["name"]: e["offset"] for e in header["tensors"]}
    assert all(e["quant"]["scale_offset"] == offsets[e["quant"]["scale"]] for e in quant)


def test_quantized_tensor_needs_its_scales() -> None:
    packed = Tensor(np.zeros(2, dtype=np.uint8), dtype=DType.PACKED_U4, shape=(4,))
    ckpt = Checkpoint(config={}, tensors={"w.qweight": packed}, quant_blocks={"w.qweight": 64})
    with pytest.raises(DataError, match="no scale array"):
        encode_checkpoint(ckpt)


def _corrupt(kind: str) -> bytes:
    blob = encode_checkpoint(_small())
    header, payload = _split(blob)
    if kind == "magic":
        return b"XSAMCKPT" + blob[8:]
    if kind == "version":
        return blob[:8] + struct.pack("<I", 9) + blob[12:]
    if kind == "short":
        return blob[:10]
    if kind == "header_len":
        return blob[:12] + struct.pack("<Q", 10**6) + blob[20:]
    if kind == "json":
        return blob[:20] + b"{" * 5 + blob[25:]
    if kind == "trailing":
        return blob + b"\x00"
    if kind == "truncated":
        return blob[:-1]
    if kind == "length":
        header["tensors"][0]["length"] = 12
    elif kind == "dtype":
        header["tensors"][0]["dtype"] = 99
    elif kind == "overlap":
        header["tensors"][1]["offset"] = 8
    elif kind == "keys":
        del header["meta"]
    return _join(header, payload)


@pytest.mark.parametrize(
    ("kind", "message"),
    [
        ("magic", "bad magic"),
        ("version", "version 9"),
        ("short", "too short"),
        ("header_len", "past the end"),
        ("json", "malformed header"),
        ("keys", "malformed header"),
        ("trailing", "trailing bytes"),
        ("truncated", "past the end"),
        ("length", "12 bytes"),
        ("dtype", "unknown dtype code 99"),
        ("overlap", "overlaps"),
    ],
)
def test_corrupt_checkpoints(kind: str, message: str) -> None:
    with pytest.raises(DataError, match=message):
        decode_checkpoint(_corrupt(kind))


def test_missing_checkpoint_file(tmp_path: Path) -> None:
    with pytest.raises(DataError, match="missing checkpoint"):
        load_checkpoint(tmp_path / "absent.psam")


def test_load_state_mismatches(tiny_model: TinyFactory) -> None:
    model = tiny_model()
    tensors = Checkpoint.from_model(model, {}).tensors
    partial = dict(tensors)
    partial.pop("mask_decoder.mask_token")
    with pytest.raises(DataError, match="missing"):
        load_state(model, partial)
    with pytest.raises(DataError, match="unexpected"):
        load_state(model, {**tensors, "extra": Tensor(np.zeros(1, dtype=np.float32), dtype=DType.F32)})
    wrong = dict(tensors)
    wrong["mask_decoder.mask_token"] = Tensor(np.zeros((1, 3), dtype=np.float32), dtype=DType.F32)
    with pytest.raises(ShapeError):
        load_state(model, wrong)
