"""Binary parameter checkpoints.

Layout: 8-byte magic "MALCKPT1", then a u32 little-endian entry count, then
per entry: name length (u32 LE), UTF-8 name, rank (u32 LE), one u32 LE per
dimension, and the raw float32 little-endian element data.  The loader
rejects unknown magic, truncation, and trailing bytes.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .autodiff import ParamStore, Tensor

MAGIC = b"MALCKPT1"


class CheckpointFormatError(ValueError):
    """The file is not a well-formed checkpoint."""


def save_checkpoint(path: str, params: ParamStore) -> None:
    """Write atomically: a temp file in the same directory, then rename."""
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name, t in params.items():
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(t.data, dtype="<f4")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, have {len(self.blob) - self.pos}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read all entries back as float32 arrays, in file order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"bad magic in {path!r}: not a checkpoint file")
    count = reader.u32()
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        n_elems = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(4 * n_elems), dtype="<f4").reshape(shape)
        if name in arrays:
            raise CheckpointFormatError(f"duplicate entry {name!r}")
        arrays[name] = data.copy()
    if reader.pos != len(blob):
        raise CheckpointFormatError(f"{len(blob) - reader.pos} trailing bytes after last entry")
    return arrays


def params_from_arrays(arrays: dict[str, np.ndarray]) -> ParamStore:
    params = ParamStore()
    for name, data in arrays.items():
        params.add(name, Tensor(np.asarray(data, dtype=np.float32).copy()))
    return params
