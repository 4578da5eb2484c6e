"""Binary checkpoint of named tensors.

Layout (little-endian)::

    b"RGDF"
    u32 version
    u32 tensor count
    per tensor: u16 name length, name (utf-8), u8 rank, u32 dims[rank], f32 values[prod(dims)]
    u32 CRC-32 of every byte between the magic and the CRC

Values are stored as float32; loading widens them back to float64.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"RGDF"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCRCError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    body = bytearray(struct.pack("<II", VERSION, len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointFormatError(f"tensor '{name}' cannot be encoded")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint: bad magic bytes")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(blob)} (needed {pos + n})")
        out = blob[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name_raw = take(nlen)
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        values = take(4 * int(np.prod(dims, dtype=np.int64)))
        entries.append((name_raw, dims, values))
    (crc,) = struct.unpack("<I", take(4))
    if pos != len(blob):
        raise CheckpointFormatError(f"{len(blob) - pos} trailing bytes after checkpoint")
    if zlib.crc32(blob[4:pos - 4]) != crc:
        raise CheckpointCRCError("checkpoint CRC mismatch (file corrupted)")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    out = {}
    for name_raw, dims, values in entries:
        try:
            name = name_raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError("tensor name is not utf-8") from exc
        out[name] = np.frombuffer(values, dtype="<f4").astype(np.float64).reshape(dims)
    return out


def save_checkpoint(params: dict[str, Tensor], path) -> None:
    Path(path).write_bytes(encode({k: v.data for k, v in params.items()}))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def load_into(params: dict[str, Tensor], path) -> None:
    """Overwrite ``params`` in place; names and shapes must match exactly."""
    loaded = load_checkpoint(path)
    if set(loaded) != set(params):
        missing, extra = set(params) - set(loaded), set(loaded) - set(params)
        raise CheckpointFormatError(f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}")
    for name, arr in loaded.items():
        if arr.shape != params[name].shape:
            raise CheckpointFormatError(f"shape mismatch for '{name}': {arr.shape} vs {params[name].shape}")
        params[name].data = arr
