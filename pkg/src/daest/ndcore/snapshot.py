"""Single-tensor binary snapshot format.

Layout, all little-endian:

========  =====================================
bytes     field
========  =====================================
4         magic ``b"NDC1"``
1         dtype code (0 = float64, 1 = float32)
1         rank
8 * rank  extents, uint64 each
payload   row-major array data
========  =====================================
"""

from __future__ import annotations

import io
import struct

import numpy as np

from daest.ndcore.tensor import NdcoreError

__all__ = ["SnapshotError", "write_snapshot", "read_snapshot", "snapshot_bytes", "array_from_snapshot"]

MAGIC = b"NDC1"

_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES_BY_KIND = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class SnapshotError(NdcoreError):
    """Malformed or unsupported snapshot data."""


def write_snapshot(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODES_BY_KIND:
        raise SnapshotError(f"unsupported dtype {arr.dtype}; expected float32/float64")
    code = _CODES_BY_KIND[arr.dtype]
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())


def read_snapshot(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise SnapshotError(f"bad magic {magic!r}, expected {MAGIC!r}")
    head = fh.read(2)
    if len(head) != 2:
        raise SnapshotError("truncated snapshot header")
    code, rank = struct.unpack("<BB", head)
    if code not in _DTYPE_CODES:
        raise SnapshotError(f"unknown dtype code {code}")
    ext_bytes = fh.read(8 * rank)
    if len(ext_bytes) != 8 * rank:
        raise SnapshotError("truncated extents")
    shape = struct.unpack(f"<{rank}Q", ext_bytes) if rank else ()
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise SnapshotError("truncated payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def snapshot_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_snapshot(buf, arr)
    return buf.getvalue()


def array_from_snapshot(data: bytes) -> np.ndarray:
    return read_snapshot(io.BytesIO(data))
