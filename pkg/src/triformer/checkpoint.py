"""TFCK checkpoint container.

Layout (all integers little-endian)::

    b"TFCK" | u32 header_len | JSON header | u32 n_tensors |
    n_tensors x (u16 name_len | name | u8 ndim | ndim x u32 | f32 data) |
    32-byte SHA-256 of every preceding byte

The JSON header carries the config echo and free-form metadata. Tensors are
stored as float32 regardless of the model's compute dtype.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

MAGIC = b"TFCK"


class ChecksumError(FormatError):
    pass


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.header.get("kind", "triformer")


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC]
    hb = json.dumps(ckpt.header, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(hb)), hb, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if raw[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 4 + 4 + 4 + 32:
        raise FormatError(f"{source}: truncated checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{source}: checksum mismatch (file corrupt or truncated)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise FormatError(f"{source}: truncated at byte {pos}")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(hlen).decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise FormatError(f"{source}: malformed header ({e})") from None
    (n,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        if name in tensors:
            raise FormatError(f"{source}: duplicate tensor name {name!r}")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(body):
        raise FormatError(f"{source}: {len(body) - pos} trailing bytes after tensors")
    return Checkpoint(header, tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror or e}") from None
    return decode(raw, str(path))


def model_checkpoint(model, kind: str = "triformer", **meta) -> Checkpoint:
    header = {"kind": kind, "config": model.config.to_dict(), "meta": meta}
    return Checkpoint(header, {k: v.copy() for k, v in model.state_dict().items()})


def digest_tensors(tensors: dict[str, np.ndarray]) -> str:
    """Stable hash of named tensors (used to prove a model was left untouched)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
