"""Flat little-endian binary format for parameter snapshots.

Layout: ``u64 count``, then per parameter ``u64 name_len``, UTF-8 name,
``u64 rank``, ``rank x u64`` dims, and ``prod(dims) x f64`` values in
row-major order. All integers and floats are little-endian.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

_U64 = struct.Struct("<Q")


def dumps(params: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(_U64.pack(len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        buf.write(_U64.pack(len(raw)))
        buf.write(raw)
        arr = np.asarray(arr)
        buf.write(_U64.pack(arr.ndim))
        for dim in arr.shape:
            buf.write(_U64.pack(dim))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(blob: bytes, dtype=np.float64) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def u64():
        nonlocal pos
        if pos + 8 > len(view):
            raise ValueError("truncated snapshot")
        (val,) = _U64.unpack_from(view, pos)
        pos += 8
        return val

    out = {}
    for _ in range(u64()):
        n = u64()
        if pos + n > len(view):
            raise ValueError("truncated snapshot")
        name = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        shape = tuple(u64() for _ in range(u64()))
        count = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * count > len(view):
            raise ValueError(f"truncated snapshot in parameter {name!r}")
        out[name] = np.frombuffer(view[pos:pos + 8 * count], dtype="<f8").reshape(shape).astype(dtype)
        pos += 8 * count
    if pos != len(view):
        raise ValueError("trailing bytes after snapshot")
    return out


def save(params: dict[str, np.ndarray], path) -> None:
    Path(path).write_bytes(dumps(params))


def load(path, dtype=np.float64) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes(), dtype)
