"""Binary PGM (P5, 8-bit) image I/O.

Byte layout written: ``P5\\n<width> <height>\\n255\\n`` followed by height*width
raw bytes in row-major order. The reader additionally tolerates comment lines
and arbitrary whitespace in the header, per the netpbm convention.
"""

from __future__ import annotations

import numpy as np


class PgmError(ValueError):
    pass


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise PgmError(f"write_pgm needs a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _header_tokens(data: bytes):
    """Yield (token, offset_after_token), skipping whitespace and comments."""
    i = 0
    while i < len(data):
        c = data[i:i + 1]
        if c.isspace():
            i += 1
        elif c == b"#":
            j = data.find(b"\n", i)
            i = len(data) if j < 0 else j + 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            yield data[i:j], j
            i = j


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    offset = 0
    for tok, off in _header_tokens(data):
        tokens.append(tok)
        offset = off
        if len(tokens) == 4:
            break
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise PgmError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError as e:
        raise PgmError(f"{path}: malformed PGM header") from e
    if maxval != 255:
        raise PgmError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    payload = data[offset + 1:offset + 1 + h * w]
    if len(payload) != h * w:
        raise PgmError(f"{path}: truncated payload ({len(payload)} of {h * w} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def to_gray(img: np.ndarray) -> np.ndarray:
    """[-1, 1] float image -> uint8 gray."""
    x = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    return np.round((x + 1.0) * 127.5).astype(np.uint8)


def from_gray(gray: np.ndarray) -> np.ndarray:
    return gray.astype(np.float32) / 127.5 - 1.0


def condition_to_gray(cond: np.ndarray) -> np.ndarray:
    """{0,1} edge map -> {0,255} uint8."""
    return (np.asarray(cond) > 0.5).astype(np.uint8) * 255


def gray_to_condition(gray: np.ndarray) -> np.ndarray:
    return (gray >= 128).astype(np.float32)
