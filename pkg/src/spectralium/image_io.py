"""Minimal self-contained PNG and PPM (P6) writers for 8-bit RGB output."""

from __future__ import annotations

import struct
import zlib

import numpy as np

__all__ = ["write_png", "write_ppm", "rgb8_from_float"]


def rgb8_from_float(rgb: np.ndarray) -> np.ndarray:
    """(h, w, 3) floats in [0, 1] to uint8 with round-half-away rounding."""
    return (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, rgb8: np.ndarray) -> None:
    h, w, _ = rgb8.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb8.tobytes())


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + tag
        + payload
        + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
    )


def write_png(path, rgb8: np.ndarray) -> None:
    h, w, _ = rgb8.shape
    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)  # 8-bit RGB
    raw = bytearray()
    for row in range(h):
        raw.append(0)  # filter type none
        raw.extend(rgb8[row].tobytes())
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(_chunk(b"IHDR", header))
        fh.write(_chunk(b"IDAT", zlib.compress(bytes(raw), 6)))
        fh.write(_chunk(b"IEND", b""))
