import struct

import numpy as np
import pytest

from forgemap.checkpoint import (MAGIC, checkpoint_bytes, checkpoint_hash,
                                 load_checkpoint, parse_checkpoint,
                                 save_checkpoint)
from forgemap.errors import CheckpointError


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "det.stem.conv.weight": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "det.head.linear.bias": rng.standard_normal(2).astype(np.float32),
        "scalar": np.float32(3.5).reshape(()),
    }
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert loaded[k].dtype == np.float32
        assert np.array_equal(loaded[k], np.asarray(tensors[k], np.float32))
    # serialization is canonical: same content, same bytes
    assert checkpoint_bytes(loaded) == path.read_bytes()


def test_format_layout_golden():
    data = checkpoint_bytes({"ab": np.array([1.0, 2.0], dtype=np.float32)})
    expect = (MAGIC
              + struct.pack("<II", 1, 1)
              + struct.pack("<H", 2) + b"ab"
              + struct.pack("<B", 1) + struct.pack("<I", 2)
              + np.array([1.0, 2.0], "<f4").tobytes())
    assert data == expect


def test_name_order_is_sorted():
    a = checkpoint_bytes({"b": np.zeros(1, np.float32), "a": np.ones(1, np.float32)})
    b = checkpoint_bytes({"a": np.ones(1, np.float32), "b": np.zeros(1, np.float32)})
    assert a == b
    parsed = parse_checkpoint(a)
    assert list(parsed) == ["a", "b"]


def test_bad_magic_rejected():
    with pytest.raises(CheckpointError, match="magic"):
        parse_checkpoint(b"NOPE" + b"\x00" * 16)


def test_bad_version_rejected():
    data = bytearray(checkpoint_bytes({"a": np.zeros(1, np.float32)}))
    data[4:8] = struct.pack("<I", 9)
    with pytest.raises(CheckpointError, match="version"):
        parse_checkpoint(bytes(data))


def test_truncation_rejected():
    data = checkpoint_bytes({"a": np.zeros(8, np.float32)})
    with pytest.raises(CheckpointError):
        parse_checkpoint(data[:-5])


def test_trailing_bytes_rejected():
    data = checkpoint_bytes({"a": np.zeros(1, np.float32)})
    with pytest.raises(CheckpointError, match="trailing"):
        parse_checkpoint(data + b"x")


def test_hash_changes_with_content():
    base = {"a": np.zeros(4, np.float32)}
    changed = {"a": np.zeros(4, np.float32)}
    changed["a"][0] = 1e-20
    assert checkpoint_hash(base) != checkpoint_hash(changed)
    assert checkpoint_hash(base) == checkpoint_hash({"a": np.zeros(4, np.float32)})
