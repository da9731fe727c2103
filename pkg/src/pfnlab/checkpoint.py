"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PFN1"
    u32 format version (1)
    u32 x 7   d_model, n_layers, n_heads, d_ff, max_features, max_classes, max_context
    u64       training seed
    u64       training step count
    u16 + utf-8   prior fingerprint
    u32       tensor count
    per tensor:
        u16 + utf-8   name
        u8            ndim
        u32 x ndim    shape
        f32 x prod(shape)   data, row-major
    8 bytes   BLAKE2b-64 digest of every preceding byte

Serialization is deterministic: equal checkpoints give equal bytes.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CorruptionError
from .model import Checkpoint, ModelConfig

MAGIC = b"PFN1"
VERSION = 1
_CONFIG_FIELDS = ("d_model", "n_layers", "n_heads", "d_ff", "max_features", "max_classes", "max_context")


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def to_bytes(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.config
    out = [MAGIC, struct.pack("<I", VERSION)]
    out.append(struct.pack("<7I", *(getattr(cfg, f) for f in _CONFIG_FIELDS)))
    out.append(struct.pack("<QQ", ckpt.seed, ckpt.steps))
    tag = ckpt.prior_hash.encode()
    out.append(struct.pack("<H", len(tag)) + tag)
    out.append(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        key = name.encode()
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(out)
    return body + _digest(body)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 8 or data[:4] != MAGIC:
        raise CorruptionError("not a PFN1 checkpoint")
    body, digest = data[:-8], data[-8:]
    if _digest(body) != digest:
        raise CorruptionError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CorruptionError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig(**dict(zip(_CONFIG_FIELDS, r.unpack("<7I"))))
    seed, steps = r.unpack("<QQ")
    (n,) = r.unpack("<H")
    prior_hash = r.take(n).decode()
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
        params[name] = arr
    if r.pos != len(body):
        raise CorruptionError("trailing bytes after last tensor")
    return Checkpoint(cfg, params, prior_hash, seed, steps).frozen()


def checksum(ckpt: Checkpoint) -> str:
    return _digest(to_bytes(ckpt)).hex()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically: a temp file in the target directory is renamed into place."""
    path = Path(path)
    data = to_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
