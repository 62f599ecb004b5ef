"""Binary PPM (P6) / PGM (P5) readers and writers, 8-bit, maxval 255."""

from __future__ import annotations

import numpy as np

from .errors import ForgemapError


def quantize8(img: np.ndarray) -> np.ndarray:
    """Round values in [0,1] onto the 8-bit grid, still as float32."""
    return (np.rint(np.clip(img, 0.0, 1.0) * 255.0) / np.float32(255.0)).astype(np.float32)


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """img: [3, H, W] float in [0, 1]."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ForgemapError(f"write_ppm: expected [3,H,W], got {img.shape}")
    _, h, w = img.shape
    data = _to_bytes(img).transpose(1, 2, 0)  # HWC interleaved
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    """img: [H, W] float in [0, 1]."""
    if img.ndim != 2:
        raise ForgemapError(f"write_pgm: expected [H,W], got {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_to_bytes(img).tobytes())


def _read_header(fh, magic):
    if fh.read(2) != magic:
        raise ForgemapError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise ForgemapError("truncated header")
        body = line.split(b"#", 1)[0]
        fields.extend(body.split())
    w, h, maxval = (int(v) for v in fields[:3])
    if maxval != 255:
        raise ForgemapError(f"unsupported maxval {maxval}")
    return w, h


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P6")
        raw = fh.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise ForgemapError(f"{path}: truncated pixel data")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return (data.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P5")
        raw = fh.read(w * h)
    if len(raw) != w * h:
        raise ForgemapError(f"{path}: truncated pixel data")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return data.astype(np.float32) / np.float32(255.0)
