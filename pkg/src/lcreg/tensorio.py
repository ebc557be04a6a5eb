"""Binary container for named float64 tensors, used by every checkpoint.

Layout (all integers little-endian):
    magic   4 bytes  b"LCT1"
    version u32      currently 1
    n_meta  u32      then per entry: u16 key length, key utf-8, i64 value
    n_tens  u32      then per tensor:
        u16 name length, name utf-8,
        u8 ndim, ndim x u32 dims,
        float64 little-endian row-major payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LCT1"
VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict[str, int] | None = None) -> Path:
    path = Path(path)
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta = meta or {}
    parts.append(struct.pack("<I", len(meta)))
    for key in sorted(meta):
        kb = key.encode()
        parts.append(struct.pack("<H", len(kb)) + kb + struct.pack("<q", int(meta[key])))
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.astype("<f8").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return path


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"load_tensors: bad magic in {path}")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != VERSION:
        raise ValueError(f"load_tensors: unsupported version {version}")
    (n_meta,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta: dict[str, int] = {}
    for _ in range(n_meta):
        (klen,) = struct.unpack_from("<H", blob, off)
        off += 2
        key = blob[off:off + klen].decode()
        off += klen
        (val,) = struct.unpack_from("<q", blob, off)
        off += 8
        meta[key] = val
    (n_tens,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tens):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
        off += 8 * count
        tensors[name] = arr.reshape(dims) if ndim else arr.reshape(())
    if off != len(blob):
        raise ValueError("load_tensors: trailing bytes in container")
    return tensors, meta
