"""Binary PPM (P6) reading/writing and a bare PNG encoder for SVG embedding."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np


class ImageReadError(ValueError):
    pass


def _tokens(buf: bytes, count: int):
    """First ``count`` whitespace-separated header tokens, skipping # comments."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ImageReadError("truncated PPM header")
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        out.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    (magic, w, h, maxval), pos = _tokens(buf, 4)
    if magic != b"P6":
        raise ImageReadError(f"unsupported PPM magic {magic!r}, expected P6")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageReadError("malformed PPM header") from exc
    if w <= 0 or h <= 0 or not 0 < maxval <= 255:
        raise ImageReadError(f"unsupported PPM geometry {w}x{h} maxval {maxval}")
    raster = buf[pos:pos + w * h * 3]
    if len(raster) != w * h * 3:
        raise ImageReadError("truncated PPM raster")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    if maxval != 255:
        arr = np.rint(arr.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return arr.copy()


def read_ppm(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ImageReadError(f"cannot read {path}: {exc}") from exc
    return decode_ppm(buf)


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 pixels, got {pixels.shape}")
    h, w = pixels.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def write_ppm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(pixels))


def encode_png(pixels: np.ndarray) -> bytes:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape[:2]
    rows = np.concatenate([np.zeros((h, 1), np.uint8), pixels.reshape(h, w * 3)], axis=1)

    def chunk(kind: bytes, data: bytes) -> bytes:
        return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data))

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", header)
            + chunk(b"IDAT", zlib.compress(rows.tobytes(), 6)) + chunk(b"IEND", b""))
