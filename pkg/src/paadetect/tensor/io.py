"""``.ten`` tensor files.

Layout: ``b"TEN1"``, one dtype byte, one rank byte, ``rank`` little-endian
u64 extents, then the row-major little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TEN1"

DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
    3: np.dtype("<i8"),
}


class TenFormatError(ValueError):
    pass


def ten_bytes(array) -> bytes:
    arr = np.asarray(array)
    code = next((c for c, dt in DTYPE_CODES.items() if arr.dtype == dt), None)
    if code is None:
        raise TenFormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise TenFormatError("rank above 255")
    head = MAGIC + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def parse_ten(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns it and the end offset."""
    if buf[offset:offset + 4] != MAGIC:
        raise TenFormatError(f"bad magic at offset {offset}")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in DTYPE_CODES:
        raise TenFormatError(f"unknown dtype code {code}")
    pos = offset + 6
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dt = DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    end = pos + count * dt.itemsize
    if end > len(buf):
        raise TenFormatError("truncated payload")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape).copy()
    return arr, end


def save_ten(path, array) -> None:
    Path(path).write_bytes(ten_bytes(array))


def load_ten(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = parse_ten(buf)
    if end != len(buf):
        raise TenFormatError(f"{len(buf) - end} trailing bytes in {path}")
    return arr
