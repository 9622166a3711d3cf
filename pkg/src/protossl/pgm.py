"""Binary PGM (P5) reading and writing, 8-bit and 16-bit.

Pixels map to floats in [0,1] by dividing by the file's maxval; writing
quantizes with round-half-up at the requested maxval. 16-bit samples are
big-endian per the PGM convention.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, CorruptionError, FormatError


def _parse_header(raw: bytes):
    """Return (width, height, maxval, payload_offset), skipping # comments."""
    if raw[:2] != b"P5":
        raise FormatError(f"not a binary PGM (P5) file, header starts {raw[:2]!r}")
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        if pos >= len(raw):
            raise CorruptionError("PGM header ended before width/height/maxval")
        ch = raw[pos]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == ord("#"):
            nl = raw.find(b"\n", pos)
            pos = len(raw) if nl < 0 else nl + 1
        elif ord("0") <= ch <= ord("9"):
            end = pos
            while end < len(raw) and ord("0") <= raw[end] <= ord("9"):
                end += 1
            tokens.append(int(raw[pos:end]))
            pos = end
        else:
            raise FormatError(f"unexpected byte {raw[pos:pos + 1]!r} in PGM header")
    # exactly one whitespace byte separates the header from the payload
    if pos >= len(raw) or raw[pos] not in b" \t\r\n":
        raise FormatError("missing whitespace after PGM maxval")
    width, height, maxval = tokens
    if width <= 0 or height <= 0:
        raise FormatError(f"bad PGM dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise FormatError(f"bad PGM maxval {maxval}")
    return width, height, maxval, pos + 1


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a P5 file; returns (float32 pixels in [0,1] of shape (H, W), maxval)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    width, height, maxval, offset = _parse_header(raw)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    payload = raw[offset:]
    if len(payload) < expected:
        raise CorruptionError(f"{path}: PGM payload is {len(payload)} bytes, expected {expected}")
    pixels = np.frombuffer(payload[:expected], dtype=dtype).reshape(height, width)
    return (pixels.astype(np.float32) / np.float32(maxval)), maxval


def write_pgm(path, pixels: np.ndarray, maxval: int = 65535) -> None:
    """Write [0,1] float pixels as a P5 file at the given bit depth."""
    if not 0 < maxval < 65536:
        raise ConfigError(f"maxval must be in [1, 65535], got {maxval}")
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ConfigError(f"PGM pixels must be 2-D, got shape {arr.shape}")
    quant = np.clip(np.floor(arr.astype(np.float64) * maxval + 0.5), 0, maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(quant.astype(dtype).tobytes())
