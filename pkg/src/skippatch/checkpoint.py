"""Versioned flat-binary checkpoints.

Layout (all integers little-endian)::

    b"SPGN"  u32 version  u32 meta_len  meta (UTF-8 JSON)
    repeated until the trailer, in sorted name order:
        u32 name_len  name (UTF-8)  u32 rank  u64 extent * rank  f64 data
    u64 checksum   # first 8 bytes of BLAKE2b(digest_size=8) over everything before it

``meta`` holds the training configuration, step number, RNG state and
optimizer counters; tensors hold parameters and optimizer moments.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SPGN"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(meta)), meta]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


def decode(data: bytes) -> Checkpoint:
    if len(data) < 20:
        raise CheckpointError(f"checkpoint truncated ({len(data)} bytes)")
    body, trailer = data[:-8], data[-8:]
    if _checksum(body) != trailer:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted or truncated")
    if body[:4] != MAGIC:
        raise CheckpointError(f"bad magic {body[:4]!r}")
    version, meta_len = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    pos = 12
    try:
        meta = json.loads(body[pos : pos + meta_len].decode())
        pos += meta_len
        tensors = {}
        while pos < len(body):
            (nlen,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4 : pos + 4 + nlen].decode()
            pos += 4 + nlen
            (rank,) = struct.unpack_from("<I", body, pos)
            shape = struct.unpack_from(f"<{rank}Q", body, pos + 4)
            pos += 4 + 8 * rank
            count = int(np.prod(shape))
            if pos + 8 * count > len(body):
                raise CheckpointError(f"tensor {name!r} truncated")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return Checkpoint(meta, tensors, version)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read ({exc.strerror})") from exc
    return decode(data)
