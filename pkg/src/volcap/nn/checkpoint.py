"""VCKP checkpoint files.

Layout (little-endian): magic ``b"VCKP"`` followed by records until EOF.  Each
record is ``u32 name_len``, UTF-8 name, ``u8 rank``, ``rank x u32`` dims and the
row-major float64 payload.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from ..exceptions import FormatError

MAGIC = b"VCKP"


def dumps(tensors: dict) -> bytes:
    parts = [MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict:
    if buf[:4] != MAGIC:
        raise FormatError("not a VCKP checkpoint (bad magic)")
    out = {}
    pos = 4
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 8 * count
            if end > len(buf):
                raise FormatError(f"truncated payload for record {name!r}")
            out[name] = np.frombuffer(buf[pos:end], dtype="<f8").reshape(dims).astype(np.float64)
            pos = end
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    return out


def save(path, tensors: dict):
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict:
    return loads(Path(path).read_bytes())


def digest(tensors: dict) -> str:
    """SHA-256 of the serialized form; equal digests mean bit-identical state."""
    return hashlib.sha256(dumps(tensors)).hexdigest()
