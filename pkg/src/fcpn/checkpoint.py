"""Binary checkpoint format.

Layout (little-endian)::

    b"FCPN"  u16 version  u32 config_len  config_len bytes of UTF-8 JSON
    u32 n_params
    per parameter: u16 name_len, name (UTF-8), u8 rank, rank x u32 extents,
                   prod(extents) x f32 payload
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import CorruptFileError

MAGIC = b"FCPN"
VERSION = 1


def encode_checkpoint(params, config: dict) -> bytes:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes):
    """Return ``(config dict, {name: float32 array})``; raises CorruptFileError."""
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise CorruptFileError(f"checkpoint truncated while reading {what} at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CorruptFileError("not a checkpoint: bad magic")
    version, blob_len = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise CorruptFileError(f"unsupported checkpoint version {version}")
    try:
        config = json.loads(bytes(take(blob_len, "config")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"checkpoint config blob is not valid JSON: {exc}") from None
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptFileError(f"parameter name at byte {pos} is not UTF-8") from None
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n = int(np.prod(shape, dtype=np.int64))
        payload = take(4 * n, f"payload of {name}")
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if pos != len(view):
        raise CorruptFileError(f"{len(view) - pos} trailing bytes after last parameter")
    return config, params


def save_checkpoint(path, params, config: dict) -> str:
    """Write the checkpoint and return the SHA-256 of its bytes."""
    data = encode_checkpoint(params, config)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
