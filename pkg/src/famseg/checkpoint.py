"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"FAMSEGCK"
    version    u32
    config     u32 length + UTF-8 JSON (sorted keys)
    digest     32 bytes, SHA-256 of the config JSON
    meta       u32 length + UTF-8 JSON (training state, free form)
    count      u32
    count x    u16 name length, name, u8 dtype code, u8 ndim, ndim x u32 dims, raw values
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FAMSEGCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    pass


def config_digest(config: dict) -> str:
    return hashlib.sha256(_canonical(config)).hexdigest()


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save(path, config: dict, tensors: dict, meta: dict | None = None) -> None:
    cfg = _canonical(config)
    meta_b = _canonical(meta or {})
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg, hashlib.sha256(cfg).digest(),
             struct.pack("<I", len(meta_b)), meta_b, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(_DTYPES[_CODES[arr.dtype]], copy=False).tobytes(order="C"))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load(path) -> tuple[dict, dict, dict]:
    """Returns ``(config, tensors, meta)``."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated")
        out = buf[pos : pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    (clen,) = struct.unpack("<I", take(4))
    cfg_b = take(clen)
    if hashlib.sha256(cfg_b).digest() != take(32):
        raise CheckpointError(f"{path}: config digest mismatch")
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(take(mlen))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    return json.loads(cfg_b), tensors, meta
