"""Binary PPM (P6) reading and writing.

The header is ASCII: magic ``P6``, then width, height, and maxval
separated by whitespace, with ``#`` comment lines allowed anywhere in
between; a single whitespace byte separates the maxval from the raw RGB
payload.  Only maxval 255 is supported.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError


def _next_token(buf: bytes, pos: int, path: str) -> tuple[bytes, int]:
    """Scan the next header token, skipping whitespace and # comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise FormatError(f"{path}: truncated PPM header")
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Load a P6 file as an H x W x 3 uint8 array."""
    path = os.fspath(path)
    # unreadable paths surface as OSError; FormatError is for bad content
    with open(path, "rb") as fh:
        buf = fh.read()

    magic, pos = _next_token(buf, 0, path)
    if magic != b"P6":
        raise FormatError(f"{path}: not a P6 PPM (magic {magic!r})")
    fields = []
    for name in ("width", "height", "maxval"):
        token, pos = _next_token(buf, pos, path)
        try:
            value = int(token)
        except ValueError:
            raise FormatError(f"{path}: non-numeric {name} {token!r}") from None
        if value <= 0:
            raise FormatError(f"{path}: {name} must be positive, got {value}")
        fields.append(value)
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # the single whitespace byte before the payload
    need = width * height * 3
    payload = buf[pos:pos + need]
    if len(payload) != need:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    """Write an H x W x 3 uint8 array as a P6 file."""
    path = os.fspath(path)
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"{path}: pixels must be HxWx3, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise FormatError(f"{path}: pixels must be uint8, got {arr.dtype}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def to_unit(pixels: np.ndarray) -> np.ndarray:
    """uint8 RGB -> float64 in [0, 1]."""
    return pixels.astype(np.float64) / 255.0


def from_unit(pixels: np.ndarray) -> np.ndarray:
    """float64 in [0, 1] -> uint8 RGB with round-half-away quantization."""
    return (np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
