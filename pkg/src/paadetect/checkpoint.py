"""PAAC checkpoint container.

Layout: ``b"PAAC"``, u32 version, u32 entry count, then per entry a u16
name length, the UTF-8 name and one ``.ten`` record.  All integers are
little-endian and entries keep insertion order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor.io import TenFormatError, parse_ten, ten_bytes

MAGIC = b"PAAC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(ten_bytes(arr))
    return b"".join(parts)


def parse_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a PAAC checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        try:
            out[name], pos = parse_ten(buf, pos)
        except TenFormatError as exc:
            raise CheckpointError(f"entry {name!r}: {exc}") from exc
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes")
    return out


def save_checkpoint(path, entries: Mapping[str, np.ndarray]) -> None:
    """Write atomically (temporary file then rename)."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(entries))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return parse_checkpoint(Path(path).read_bytes())


def json_entry(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def read_json_entry(arr: np.ndarray):
    return json.loads(arr.tobytes().decode("utf-8"))
