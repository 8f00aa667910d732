"""Minimal binary PGM (P5) and PFM readers/writers.

PGM carries 8-bit masks; PFM carries float images (grayscale ``Pf`` or
3-channel ``PF``). PFM rows are stored bottom-up with a negative scale
marking little-endian payloads, which is the common convention. Arrays in
memory are always top-down, row 0 at the top.
"""

from __future__ import annotations

import numpy as np

from .errors import ParseError, StructuralError


def write_pgm(path, values: np.ndarray) -> None:
    """Write a 2D uint8 array as binary PGM with maxval 255."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise StructuralError(f"PGM wants a 2D array, got shape {values.shape}")
    if values.dtype != np.uint8:
        if np.issubdtype(values.dtype, np.integer) and values.min() >= 0 and values.max() <= 255:
            values = values.astype(np.uint8)
        else:
            raise StructuralError("PGM wants uint8 values in [0, 255]")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(values).tobytes())


def _read_token(fh, path) -> bytes:
    # whitespace-separated header token, '#' comments allowed
    tok = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise ParseError(f"{path}: truncated header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a (H, W) uint8 array."""
    with open(path, "rb") as fh:
        magic = _read_token(fh, path)
        if magic != b"P5":
            raise ParseError(f"{path}: not a binary PGM (magic {magic!r})")
        try:
            w = int(_read_token(fh, path))
            h = int(_read_token(fh, path))
            maxval = int(_read_token(fh, path))
        except ValueError:
            raise ParseError(f"{path}: malformed PGM header")
        if maxval != 255:
            raise ParseError(f"{path}: only maxval 255 is supported, got {maxval}")
        data = fh.read(w * h)
        if len(data) != w * h:
            raise ParseError(f"{path}: truncated pixel data")
        return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_pfm(path, values: np.ndarray) -> None:
    """Write a (H, W) or (H, W, 3) float array as little-endian PFM."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        magic = b"Pf"
    elif values.ndim == 3 and values.shape[2] == 3:
        magic = b"PF"
    else:
        raise StructuralError(f"PFM wants (H, W) or (H, W, 3), got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise StructuralError("PFM payload contains non-finite values")
    h, w = values.shape[:2]
    payload = np.ascontiguousarray(values[::-1], dtype="<f4")  # bottom-up rows
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")  # negative scale: little-endian
        fh.write(payload.tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM into float64, top-down rows. Returns (H, W) or (H, W, 3)."""
    with open(path, "rb") as fh:
        magic = _read_token(fh, path)
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise ParseError(f"{path}: not a PFM (magic {magic!r})")
        try:
            w = int(_read_token(fh, path))
            h = int(_read_token(fh, path))
            scale = float(_read_token(fh, path))
        except ValueError:
            raise ParseError(f"{path}: malformed PFM header")
        if scale == 0:
            raise ParseError(f"{path}: PFM scale must be nonzero")
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * channels
        data = fh.read(count * 4)
        if len(data) != count * 4:
            raise ParseError(f"{path}: truncated pixel data")
        arr = np.frombuffer(data, dtype=dtype).astype(np.float64)
        arr = arr.reshape(h, w, channels)[::-1]
        return arr[..., 0].copy() if channels == 1 else arr.copy()
