"""Binary checkpoint container.

Layout (little-endian)::

    b"RACN"  u8 version
    u32 config_len  config_len bytes of UTF-8 JSON
    u32 n_tensors
    per tensor: u32 name_len, name, u32 ndim, ndim * u32 dims, prod(dims) * f64

Tensors are written in sorted name order so equal models give equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import BadMagicError, CodecError, TruncatedError
from .model import ModelConfig, RacnetModel

MAGIC = b"RACN"
VERSION = 1


def encode_checkpoint(config: dict, params: dict[str, np.ndarray]) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        key = name.encode()
        parts += [struct.pack("<I", len(key)), key, struct.pack("<I", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad checkpoint magic {buf[:4]!r}")
    r = _Reader(buf)
    r.take(4)
    version = r.take(1)[0]
    if version != VERSION:
        raise CodecError(f"unsupported checkpoint version {version}")
    config = json.loads(r.take(r.u32()).decode())
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise CodecError(f"{len(buf) - r.pos} trailing bytes after checkpoint tensors")
    return config, params


def save_model(m: RacnetModel, path) -> None:
    Path(path).write_bytes(encode_checkpoint({"kind": "racnet", **m.config.to_dict()}, m.params))


def load_model(path) -> RacnetModel:
    config, params = decode_checkpoint(Path(path).read_bytes())
    kind = config.pop("kind", "racnet")
    if kind != "racnet":
        raise CodecError(f"{path}: checkpoint holds a {kind!r}, not a racnet model")
    return RacnetModel(ModelConfig.from_dict(config), params)


def params_digest(params: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(encode_checkpoint({}, params)).hexdigest()
