"""Versioned binary checkpoints: named float64 arrays plus a JSON config echo.

Layout (little endian)::

    b"DRCK" | u16 version | u32 len | config JSON | u32 n_arrays
    per array: u16 len | name | u8 ndim | u32 * ndim dims | float64 data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .synthdata import atomic_write_bytes

MAGIC = b"DRCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(arrays: Mapping[str, np.ndarray], config: Mapping) -> bytes:
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, cfg_len = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    config = json.loads(blob[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(blob[pos:pos + nbytes], dtype="<f8").reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last array")
    return arrays, config


def save_checkpoint(path: Path, arrays: Mapping[str, np.ndarray], config: Mapping) -> None:
    atomic_write_bytes(Path(path), encode_checkpoint(arrays, config))


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())
