"""Grayscale image files: binary PGM natively, PNG through Pillow when installed."""

from __future__ import annotations

import io
import os
import re

import numpy as np

from .autodiff.serialize import atomic_write


class ImageError(ValueError):
    pass


_PGM_HEADER = re.compile(rb"^P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def decode_pgm(blob: bytes) -> np.ndarray:
    m = _PGM_HEADER.match(blob)
    if m is None:
        raise ImageError("not a binary PGM (P5) image")
    w, h, maxval = (int(v) for v in m.groups())
    if not 0 < maxval < 65536 or w <= 0 or h <= 0:
        raise ImageError(f"bad PGM header: {w}x{h} maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    pixels = blob[m.end() :]
    if len(pixels) != w * h * dtype.itemsize:
        raise ImageError(f"PGM payload has {len(pixels)} bytes, expected {w * h * dtype.itemsize}")
    return (np.frombuffer(pixels, dtype=dtype).reshape(h, w) / maxval).astype(np.float32)


def encode_pgm(img: np.ndarray) -> bytes:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ImageError(f"expected a 2-D grayscale image, got shape {arr.shape}")
    q = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (q.shape[1], q.shape[0]) + q.tobytes()


def read_image(path: str) -> np.ndarray:
    """Load a grayscale image as float32 in [0, 1]."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ImageError(f"cannot read {path}: {exc.strerror}") from exc
    if blob.startswith(b"P5"):
        return decode_pgm(blob)
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageError(f"{path}: only PGM is supported without Pillow") from exc
    try:
        with Image.open(path) as im:
            return (np.asarray(im.convert("L"), dtype=np.float32) / 255.0).astype(np.float32)
    except OSError as exc:
        raise ImageError(f"cannot decode {path}") from exc


def write_image(path: str, img: np.ndarray) -> None:
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ""):
        atomic_write(path, encode_pgm(img))
        return
    from PIL import Image

    q = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q).save(buf, format=ext.lstrip(".").upper().replace("JPG", "JPEG"))
    atomic_write(path, buf.getvalue())
