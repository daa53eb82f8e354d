"""Binary parameter checkpoints.

Layout (little-endian): magic "SRNN", version u32, then per parameter
(name length u32, utf-8 name, rank u32, dims u32[rank], float32 data).
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable

import numpy as np

from .layers import Param

MAGIC = b"SRNN"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def save_params(path, params: Iterable[Param]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for p in params:
            name = p.name.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            shape = p.value.shape
            f.write(struct.pack("<I", len(shape)))
            for d in shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def read_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError("magic", f"{path} is not an SRNN checkpoint")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError("version", f"unsupported version {version}")
        out: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(dims)
            out[name] = data.copy()
        return out


def load_params(path, params: Iterable[Param]) -> None:
    """Assign stored values into `params` by name; shapes must match."""
    stored = read_params(path)
    for p in params:
        if p.name not in stored:
            raise CheckpointError("name", f"parameter {p.name} missing from {path}")
        value = stored[p.name]
        if value.shape != p.value.shape:
            raise CheckpointError(
                "shape", f"{p.name}: stored {value.shape} != expected {p.value.shape}")
        p.value[...] = value.astype(p.value.dtype)


def params_sha256(params: Iterable[Param]) -> str:
    """Hex digest over parameter names and float32 little-endian bytes, in order."""
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode("utf-8"))
        h.update(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    return h.hexdigest()
