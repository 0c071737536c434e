"""Binary checkpoint container.

Layout (little-endian)::

    b"SPQA" | u16 version | u32 meta_len | meta (UTF-8 JSON)
    u32 n_tensors
    n_tensors x ( u16 name_len | name (UTF-8) | u32 ndim | u32 dims... | u64 byte_offset )
    payload: float32 row-major tensors, in manifest order

``byte_offset`` is relative to the start of the payload.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError

MAGIC = b"SPQA"
VERSION = 1


def dumps(tensors: dict, meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True, ensure_ascii=False).encode("utf-8")
    head = [MAGIC, struct.pack("<HI", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    payload = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        head.append(struct.pack("<H", len(raw)) + raw)
        head.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        head.append(struct.pack("<Q", offset))
        data = arr.tobytes()
        payload.append(data)
        offset += len(data)
    return b"".join(head + payload)


def loads(blob: bytes):
    """Return ``(meta, tensors)``; any structural problem raises :class:`IntegrityError`."""
    try:
        if blob[:4] != MAGIC:
            raise IntegrityError("not a checkpoint: bad magic bytes")
        version, meta_len = struct.unpack_from("<HI", blob, 4)
        if version != VERSION:
            raise IntegrityError(f"unsupported checkpoint version {version}")
        pos = 10
        meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        manifest = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            (offset,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            manifest.append((name, dims, offset))
        tensors = {}
        for name, dims, offset in manifest:
            n = int(np.prod(dims, dtype=np.int64))
            start = pos + offset
            if start + 4 * n > len(blob):
                raise IntegrityError(f"checkpoint truncated inside tensor {name!r}")
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=start).reshape(dims).astype(np.float32)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        raise IntegrityError(f"corrupt checkpoint: {exc}") from exc
    return meta, tensors


def save(path, tensors: dict, meta: dict | None = None) -> str:
    blob = dumps(tensors, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)


def file_sha256(path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc}") from exc
