"""Binary PGM (P5) and PPM (P6) with maxval 255."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` header tokens, skipping ``#`` comments; returns tokens and the raster offset."""
    tokens, i, n = [], 0, len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i >= n:
            raise ImageFormatError("truncated header")
        if data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j : j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    # exactly one whitespace byte separates maxval from the raster
    return tokens, i + 1


def read_netpbm(path: str | Path) -> np.ndarray:
    """Return a uint8 array of shape (H, W) for P5 or (H, W, 3) for P6."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        (magic, w, h, maxval), start = _tokens(data, 4)
        width, height, maxval = int(w), int(h), int(maxval)
    except (ImageFormatError, ValueError) as exc:
        raise ImageFormatError(f"{path}: malformed netpbm header") from exc
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported format {magic!r}; expected P5 or P6")
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} unsupported; expected 255")
    channels = 1 if magic == b"P5" else 3
    size = width * height * channels
    raster = data[start : start + size]
    if len(raster) != size:
        raise ImageFormatError(f"{path}: raster truncated ({len(raster)} of {size} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(height, width) if channels == 1 else arr.reshape(height, width, 3)


def write_netpbm(path: str | Path, pixels: np.ndarray) -> None:
    """Write a uint8 (H, W) array as P5 or an (H, W, 3) array as P6."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write array of shape {pixels.shape} as netpbm")
    h, w = pixels.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    Path(path).write_bytes(header + np.ascontiguousarray(pixels).tobytes())
