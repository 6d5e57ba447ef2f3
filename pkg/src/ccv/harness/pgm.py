"""Binary greyscale PGM ("P5", maxval 255) images as ``[1, H, W]`` float arrays in [0, 1]."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from ..tensor import Tensor


class PgmError(ValueError):
    pass


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens = []
    pos = 2
    n = len(buf)
    while len(tokens) < count:
        if pos >= n:
            raise PgmError("corrupt file: truncated header")
        c = buf[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            start = pos
            while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def decode_pgm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P5":
        raise PgmError("unsupported format")
    tokens, start = _header_tokens(buf, 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise PgmError("corrupt file: bad header") from None
    if maxval != 255:
        raise PgmError("unsupported depth")
    if width < 1 or height < 1:
        raise PgmError("corrupt file: bad dimensions")
    raster = buf[start:start + width * height]
    if len(raster) < width * height or start > len(buf):
        raise PgmError("corrupt file")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(1, height, width)
    return (pixels.astype(np.float32) / np.float32(255))


def encode_pgm(image: Union[np.ndarray, Tensor]) -> bytes:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError(f"write_pgm: expected one channel, got shape {arr.shape}")
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"write_pgm: expected [1, H, W] or [H, W], got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 1 or not np.isfinite(arr).all()):
        raise ValueError("write_pgm: values must lie in [0, 1]")
    # round half up
    pixels = np.floor(arr.astype(np.float64) * 255 + 0.5).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_pgm(image: Union[np.ndarray, Tensor], path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_pgm(image))
