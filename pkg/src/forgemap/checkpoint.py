"""Bit-exact named-tensor container.

Layout (all little-endian): magic ``DFFT``, u32 version (=1), u32 tensor
count; per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
then f32 payload in row-major order. Tensors are written in lexicographic
name order so identical contents always produce identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"DFFT"
VERSION = 1


def checkpoint_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")  # tobytes() emits C order
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor rank too large: {name!r}")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_checkpoint(data, source=str(path))


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    view = memoryview(data)
    if len(view) < 12 or bytes(view[:4]) != MAGIC:
        raise CheckpointError(f"{source}: bad magic")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", view, off)
            off += 2
            name = bytes(view[off:off + nlen]).decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", view, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", view, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = np.frombuffer(view, dtype="<f4", count=size, offset=off)
            off += 4 * size
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"{source}: truncated checkpoint") from exc
        out[name] = payload.reshape(dims).astype(np.float32)
    if off != len(view):
        raise CheckpointError(f"{source}: {len(view) - off} trailing bytes")
    return out


def checkpoint_hash(tensors: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(checkpoint_bytes(tensors)).hexdigest()
