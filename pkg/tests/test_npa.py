from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import pytest

from sam_peft.errors import DataError
from sam_peft.npa import decode, encode, load_npa, save_npa
from sam_peft.tensor import DType, Tensor


def test_header_layout() -> None:
    """Magic, dtype code, rank and little-endian extents precede the payload."""
    t = Tensor(np.arange(6, dtype=np.uint32).reshape(2, 3), dtype=DType.U32)
    blob = encode(t)
    assert blob[:4] == b"NPA1"
    assert blob[4] == int(DType.U32)
    assert blob[5] == 2
    assert struct.unpack_from("<2I", blob, 6) == (2, 3)
    assert len(blob) == 6 + 8 + 6 * 4
    assert blob[14:18] == (0).to_bytes(4, "little")
    assert blob[18:22] == (1).to_bytes(4, "little")


def test_f32_image_survives_disk(tmp_path: Path) -> None:
    image = np.random.default_rng(0).random((8, 8, 1)).astype(np.float32)
    path = tmp_path / "images" / "0.npa"
    save_npa(path, image)
    loaded = load_npa(path)
    assert loaded.dtype is DType.F32
    np.testing.assert_array_equal(loaded.data, image)


def test_packed_u4_keeps_logical_shape() -> None:
    packed = Tensor(np.array([0x21, 0x03], dtype=np.uint8), dtype=DType.PACKED_U4, shape=(3,))
    back = decode(encode(packed))
    assert back.shape == (3,)
    assert back.dtype is DType.PACKED_U4
    assert back.data.tolist() == [0x21, 0x03]


def test_bad_magic() -> None:
    with pytest.raises(DataError, match="bad magic"):
        decode(b"NPA2" + bytes(10))


def test_unknown_dtype_code() -> None:
    blob = b"NPA1" + struct.pack("<BBI", 9, 1, 4) + bytes(16)
    with pytest.raises(DataError, match="unknown dtype"):
        decode(blob)


def test_payload_length_mismatch() -> None:
    blob = encode(Tensor(np.zeros(4, dtype=np.float32)))
    with pytest.raises(DataError, match="expected 16"):
        decode(blob[:-1])


def test_zero_extent_is_rejected() -> None:
    blob = b"NPA1" + struct.pack("<BBII", int(DType.F32), 2, 0, 3)
    with pytest.raises(DataError, match="zero extent"):
        decode(blob)


def test_missing_file(tmp_path: Path) -> None:
    with pytest.raises(DataError, match="missing"):
        load_npa(tmp_path / "nope.npa")
