"""Binary checkpoint format (little-endian).

    b"ORET" | version u32 | tensor count u32
    per tensor: name length u16, UTF-8 name, rank u8, dims u64 * rank,
                dtype tag u8 (0 = f32, 1 = f64), row-major payload
    config length u64 | JSON config bytes | step u64
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"ORET"
VERSION = 1
_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_json: str
    step: int


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        _write(fh, ckpt)
    tmp.replace(path)


def _write(fh: BinaryIO, ckpt: Checkpoint) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: name or rank too large")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(struct.pack("<B", _TAGS[dt]))
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    cfg = ckpt.config_json.encode("utf-8")
    fh.write(struct.pack("<Q", len(cfg)))
    fh.write(cfg)
    fh.write(struct.pack("<Q", ckpt.step))


def read_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        (tag,) = struct.unpack("<B", take(1))
        if tag not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        dt = _DTYPES[tag]
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(size * dt.itemsize), dtype=dt).reshape(dims).copy()
        tensors[name] = arr
    (clen,) = struct.unpack("<Q", take(8))
    config_json = take(clen).decode("utf-8")
    (step,) = struct.unpack("<Q", take(8))
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(tensors, config_json, step)
