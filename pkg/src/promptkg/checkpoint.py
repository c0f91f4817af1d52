"""Versioned binary container for named float64 parameters.

Layout (all integers little-endian)::

    magic  b"PKGCKPT\\0"
    u32    format version
    32 B   SHA-256 of everything after this field
    u32    metadata length, then UTF-8 JSON metadata
    u32    entry count
    per entry: u16 name length, UTF-8 name, u8 rank, u64 × rank dims,
               float64 payload (little-endian, row-major)
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"PKGCKPT\0"
FORMAT_VERSION = 1


def _encode(arrays: dict[str, np.ndarray], metadata: dict) -> bytes:
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.require(arrays[name], dtype="<f8", requirements="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def dumps(arrays: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    body = _encode(arrays, metadata or {})
    return MAGIC + struct.pack("<I", FORMAT_VERSION) + hashlib.sha256(body).digest() + body


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint container (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    digest = blob[12:44]
    body = blob[44:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    pos = 0
    (meta_len,) = struct.unpack_from("<I", body, pos)
    pos += 4
    metadata = json.loads(body[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}Q", body, pos)
        pos += 8 * rank
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return arrays, metadata


def checksum(arrays: dict[str, np.ndarray]) -> str:
    """Content hash of parameter values alone (metadata excluded)."""
    return hashlib.sha256(_encode(arrays, {})).hexdigest()


def save(path, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, metadata))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
