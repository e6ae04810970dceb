"""Binary checkpoint container shared by every model kind.

Layout (all integers little-endian)::

    magic    8 bytes  b"EALMCKPT"
    version  u32
    hdr_len  u32, followed by hdr_len bytes of UTF-8 ``key=value`` lines
    n        u32 tensors, each:
        name_len u16, name (UTF-8)
        dtype    2 ASCII bytes: f4 | f8 | i8
        ndim     u8, then ndim x u32 dims
        raw little-endian values, row-major
"""
from __future__ import annotations

import ast
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"EALMCKPT"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}
_TAGS = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    kind: str
    meta: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        header = {"kind": self.kind, **self.meta}
        for k, v in header.items():
            if "\n" in k or "=" in k or "\n" in str(v):
                raise ConfigError(f"header entry {k!r} cannot be serialized")
        hdr = "".join(f"{k}={v}\n" for k, v in header.items()).encode("utf-8")
        parts = [MAGIC, struct.pack("<II", VERSION, len(hdr)), hdr, struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            arr = np.ascontiguousarray(arr)
            tag = _TAGS.get(arr.dtype.newbyteorder("="))
            if tag is None:
                raise ConfigError(f"unsupported dtype {arr.dtype} for tensor {name}")
            raw_name = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw_name)) + raw_name + tag.encode("ascii"))
            parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.astype(_DTYPES[tag], copy=False).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != MAGIC:
            raise ConfigError("not an EALM checkpoint")
        version, hdr_len = struct.unpack_from("<II", blob, 8)
        if version != VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        pos = 16
        meta = {}
        for line in blob[pos:pos + hdr_len].decode("utf-8").splitlines():
            k, _, v = line.partition("=")
            meta[k] = v
        pos += hdr_len
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = {}
        for _ in range(n):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            dtype = _DTYPES[blob[pos:pos + 2].decode("ascii")]
            pos += 2
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
            tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
            pos += nbytes
        kind = meta.pop("kind")
        return cls(kind, meta, tensors)

    def save(self, path) -> str:
        blob = self.to_bytes()
        Path(path).write_bytes(blob)
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def tensors_hash(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def encode_config(cfg: dict) -> dict[str, str]:
    return {f"config.{k}": repr(v) for k, v in cfg.items()}


def decode_config(meta: dict[str, str]) -> dict:
    return {k[len("config."):]: ast.literal_eval(v) for k, v in meta.items() if k.startswith("config.")}
