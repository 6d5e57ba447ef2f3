"""Binary checkpoint format.

Little-endian layout::

    b"CCVW"                      magic
    u32 version                  (currently 1)
    u32 levels, u32 base_channels, u32 image_side
    u32 parameter count
    per parameter:
        u32 name length, name bytes (UTF-8)
        u32 rank, rank x u32 dims
        float32 payload, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..tensor import Tensor
from .model import Architecture, ModelWeights

MAGIC = b"CCVW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(weights: ModelWeights) -> bytes:
    arch = weights.arch
    parts = [MAGIC, struct.pack("<IIIII", VERSION, arch.levels, arch.base_channels, arch.image_side,
                                len(weights.params))]
    for name, t in weights.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(weights: ModelWeights, path: Union[str, Path]) -> None:
    Path(path).write_bytes(checkpoint_bytes(weights))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("corrupt checkpoint: truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def parse_checkpoint(buf: bytes) -> ModelWeights:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint")
    r = _Reader(buf)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    levels, base, side, count = r.u32(4)
    try:
        arch = Architecture(levels=levels, base_channels=base, image_side=side)
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    params = {}
    for _ in range(count):
        name_len = r.u32()
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("corrupt checkpoint: bad parameter name") from None
        rank = r.u32()
        dims = (r.u32(rank),) if rank == 1 else (tuple(r.u32(rank)) if rank else ())
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        params[name] = Tensor(data, dtype=np.float32)
    if r.pos != len(buf):
        raise CheckpointError("corrupt checkpoint: trailing bytes")
    try:
        return ModelWeights(arch, params)
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None


def load_checkpoint(path: Union[str, Path]) -> ModelWeights:
    return parse_checkpoint(Path(path).read_bytes())
