"""Binary tensor records: little-endian uint32 rank, uint32 dims, float32 data."""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

from ..errors import SchemaError

_LE_F32 = np.dtype("<f4")


def write_tensor(f: BinaryIO, arr: np.ndarray) -> int:
    """Append one record; returns bytes written."""
    arr = np.asarray(arr)
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    body = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
    f.write(header)
    f.write(body)
    return len(header) + len(body)


def read_tensor(f: BinaryIO) -> np.ndarray:
    raw = f.read(4)
    if len(raw) != 4:
        raise SchemaError("truncated tensor header")
    (rank,) = struct.unpack("<I", raw)
    dims_raw = f.read(4 * rank)
    if len(dims_raw) != 4 * rank:
        raise SchemaError("truncated tensor dims")
    dims = struct.unpack(f"<{rank}I", dims_raw)
    n = int(np.prod(dims, dtype=np.int64))
    body = f.read(4 * n)
    if len(body) != 4 * n:
        raise SchemaError(f"truncated tensor body: wanted {4 * n} bytes, got {len(body)}")
    return np.frombuffer(body, dtype=_LE_F32).astype(np.float32).reshape(dims)


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()
