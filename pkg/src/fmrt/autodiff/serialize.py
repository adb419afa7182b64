"""Binary weights container.

Layout (all integers unsigned 32-bit little-endian)::

    b"FMRT" | version | tensor count |
    repeated: name length | UTF-8 name | rank | extents... | float32 LE data
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import Dict, Mapping

import numpy as np

MAGIC = b"FMRT"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


def encode_weights(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode_weights(blob: bytes) -> Dict[str, np.ndarray]:
    """Parse a weights blob; the byte length must be consumed exactly."""
    mv = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(mv):
            raise WeightsFormatError(f"truncated weights file at byte {pos} (need {n} more)")
        chunk = mv[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise WeightsFormatError("bad magic; not an FMRT weights file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(bytes(take(4 * n)), dtype="<f4").reshape(shape)
        if name in out:
            raise WeightsFormatError(f"duplicate tensor name {name!r}")
        out[name] = data.astype(np.float32)
    if pos != len(mv):
        raise WeightsFormatError(f"{len(mv) - pos} trailing bytes after last tensor")
    return out


def atomic_write(path: str, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_weights(path: str, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, encode_weights(tensors))


def load_weights(path: str) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_weights(fh.read())
