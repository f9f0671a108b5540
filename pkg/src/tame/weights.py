"""Versioned little-endian binary weight files.

Layout::

    magic     8 bytes   b"TAMEWGT\\0"
    version   u32
    digest    32 bytes  sha256 of the configuration that produced the weights
    meta_len  u32, then meta_len bytes of sorted-key JSON metadata
    count     u32
    count x:  name_len u16, name utf-8, dtype tag u8 (1=f32, 2=f64),
              rank u8, dims u32[rank], raw little-endian values

Parameters are written in sorted name order so identical weights give
identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from tame.errors import DigestMismatch, FormatError

MAGIC = b"TAMEWGT\0"
VERSION = 1
DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


@dataclass
class WeightFile:
    params: dict
    digest: str
    metadata: dict = field(default_factory=dict)


def weights_bytes(params: dict, digest: str, metadata: Optional[dict] = None) -> bytes:
    raw_digest = bytes.fromhex(digest)
    if len(raw_digest) != 32:
        raise ValueError("config digest must be a sha256 hex string")
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<I", VERSION), raw_digest, struct.pack("<I", len(meta)), meta,
           struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name])
        if arr.dtype not in DTYPE_TAGS:
            raise ValueError(f"parameter {name}: unsupported dtype {arr.dtype}")
        encoded = name.encode()
        out.append(struct.pack("<H", len(encoded)) + encoded)
        out.append(struct.pack("<BB", DTYPE_TAGS[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(out)


def write_weights(path, params: dict, digest: str, metadata: Optional[dict] = None) -> bytes:
    data = weights_bytes(params, digest, metadata)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write weights {path}: {exc}") from exc
    return data


class _Reader:
    def __init__(self, data: bytes, source):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: truncated weight file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_weights(data: bytes, expected_digest: Optional[str] = None, source="<bytes>") -> WeightFile:
    r = _Reader(data, source)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{source}: not a weight file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported weight format version {version}")
    digest = r.take(32).hex()
    if expected_digest is not None and digest != expected_digest:
        raise DigestMismatch(f"{source}: weights were produced by config {digest[:12]}, expected {expected_digest[:12]}")
    (meta_len,) = r.unpack("<I")
    metadata = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        tag, rank = r.unpack("<BB")
        if tag not in TAG_DTYPES:
            raise FormatError(f"{source}: parameter {name} has unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        dtype = TAG_DTYPES[tag]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = r.take(n * dtype.itemsize)
        params[name] = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)
    if r.pos != len(data):
        raise FormatError(f"{source}: trailing bytes after the last parameter")
    return WeightFile(params, digest, metadata)


def read_weights(path, expected_digest: Optional[str] = None) -> WeightFile:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read weights {path}: {exc}") from exc
    return parse_weights(data, expected_digest, source=path)
