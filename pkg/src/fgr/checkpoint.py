"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"FGRCKPT\\0"
    version    u32
    meta_len   u32       length of the UTF-8 JSON metadata that follows
    meta       JSON      {"model": Model.to_dict(), plus caller extras}
    count      u32       number of tensors
    per tensor, in name-sorted order:
        name_len u16, name (UTF-8)
        part     u8      0 = backbone, 1 = head
        ndim     u8, then ndim x u32 dimensions
        data     prod(dims) x f64, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import BACKBONE, HEAD, Model, ModelParams
from .autodiff import Tensor

MAGIC = b"FGRCKPT\0"
VERSION = 1
_PARTS = {BACKBONE: 0, HEAD: 1}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Model, params: ModelParams, meta: dict | None = None) -> None:
    header = json.dumps({"model": model.to_dict(), **(meta or {})}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(params))]
    for name in params.names():
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", _PARTS[params.partition[name]], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[Model, ModelParams, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated")
        out = struct.unpack_from(fmt, buf, pos)
        pos += size
        return out

    version, meta_len = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta = json.loads(buf[pos : pos + meta_len].decode())
    pos += meta_len
    (count,) = take("<I")
    parts = {v: k for k, v in _PARTS.items()}
    tensors, partition = {}, {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = buf[pos : pos + name_len].decode()
        pos += name_len
        part, ndim = take("<BB")
        shape = take(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"{path}: truncated tensor {name!r}")
        data = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
        tensors[name] = Tensor(data, name=name)
        partition[name] = parts[part]
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    model = Model.from_dict(meta.pop("model"))
    expected = model.param_shapes()
    if set(expected) != set(tensors) or any(tensors[n].shape != expected[n][0] for n in tensors):
        raise CheckpointError(f"{path}: tensors do not match the {model.arch} architecture")
    return model, ModelParams(tensors, partition), meta
