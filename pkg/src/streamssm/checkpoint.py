"""Versioned binary checkpoint container for :class:`~streamssm.encoder.Encoder`.

Layout (little-endian)::

    magic   8 bytes  b"SSMCKPT\\0"
    version u16
    config  u32 length + UTF-8 JSON
    count   u32
    tensor* u16 name length, name, u8 precision (0=f32, 1=f64), u8 ndim,
            u64 dims..., raw payload in row-major order
    sha256  32 bytes over everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .encoder import Encoder, ModelConfig, param_shapes

MAGIC = b"SSMCKPT\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


class IntegrityError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


def encode_checkpoint(encoder: Encoder, precision: str = "f64") -> bytes:
    code = {"f32": 0, "f64": 1}[precision]
    cfg = json.dumps(encoder.config.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(encoder.params))]
    for name in sorted(encoder.params):
        arr = np.ascontiguousarray(encoder.params[name], dtype=_DTYPES[code])
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(buf: bytes) -> Encoder:
    if len(buf) < len(MAGIC) + 32 or buf[: len(MAGIC)] != MAGIC:
        raise IntegrityError("not a checkpoint (bad magic or truncated)")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise IntegrityError("truncated checkpoint")
        out = body[pos: pos + n]
        pos += n
        return out

    def unpack(fmt):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    (version,) = unpack("<H")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (n,) = unpack("<I")
    config = ModelConfig.from_dict(json.loads(take(n).decode()))
    expected = param_shapes(config)
    (count,) = unpack("<I")
    params = {}
    for _ in range(count):
        (ln,) = unpack("<H")
        name = take(ln).decode()
        code, ndim = unpack("<BB")
        if name not in expected:
            raise CheckpointError(f"unknown tensor {name!r}")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown precision code {code}")
        shape = unpack(f"<{ndim}Q")
        if tuple(shape) != tuple(expected[name]):
            raise CheckpointError(f"{name}: shape {shape} != {expected[name]}")
        dt = _DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        params[name] = np.frombuffer(take(size), dtype=dt).reshape(shape).astype(np.float64)
    if pos != len(body):
        raise IntegrityError("trailing bytes in checkpoint")
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"missing tensors: {sorted(missing)[:5]}")
    return Encoder(config, params)


def save_checkpoint(path, encoder: Encoder, precision: str = "f64") -> None:
    Path(path).write_bytes(encode_checkpoint(encoder, precision))


def load_checkpoint(path) -> Encoder:
    return decode_checkpoint(Path(path).read_bytes())
