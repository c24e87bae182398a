"""Binary PPM (P6, maxval 255) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PPMError(ValueError):
    pass


def _tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """First ``count`` whitespace-separated header fields, skipping # comments."""
    out, pos = [], 2
    while len(out) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PPMError("malformed PPM header")
        out.append(int(buf[start:pos]))
    return out, pos + 1  # exactly one whitespace byte before the raster


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise PPMError(f"{path}: only binary P6 PPM is supported")
    (w, h, maxval), pos = _tokens(buf, 3)
    if maxval != 255:
        raise PPMError(f"{path}: maxval {maxval} unsupported (need 255)")
    raster = buf[pos : pos + w * h * 3]
    if len(raster) != w * h * 3:
        raise PPMError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise PPMError(f"expected uint8 (H, W, 3), got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())
