"""Flat binary tensor files.

Layout: the 8-byte magic ``SRECKPT1`` followed by records until EOF. Each
record is ``name_len:u64, name:utf-8, rank:u64, dims:u64*rank, data:f32*prod``,
all little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SRECKPT1"
_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr))
        raw = name.encode("utf-8")
        chunks.append(_U64.pack(len(raw)))
        chunks.append(raw)
        chunks.append(_U64.pack(arr.ndim))
        chunks.extend(_U64.pack(n) for n in arr.shape)
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def read_u64() -> int:
        nonlocal pos
        if pos + 8 > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        (value,) = _U64.unpack_from(buf, pos)
        pos += 8
        return value

    while pos < len(buf):
        name_len = read_u64()
        if pos + name_len > len(buf):
            raise CheckpointError(f"{path}: truncated name at byte {pos}")
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rank = read_u64()
        shape = tuple(read_u64() for _ in range(rank))
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated data for {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    return out
