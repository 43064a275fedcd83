"""TIPSCKPT binary checkpoints.

Layout (all integers little-endian u32 unless noted):

    magic     8 bytes  b"TIPSCKPT"
    version   u32      currently 1
    epoch     u32      epoch whose parameters are stored
    config    u32 length + UTF-8 bytes (the run config echo)
    count     u32      number of named tensors
    tensor    u32 name length + UTF-8 name
              u32 ndim + u32 dims...
              float32 little-endian payload, row-major

Tensors are written in sorted-name order, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"TIPSCKPT"
VERSION = 1


class CheckpointError(Exception):
    """Base for checkpoint file failures."""


class CkptMagicError(CheckpointError):
    pass


class CkptVersionError(CheckpointError):
    pass


class CkptTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    version: int
    epoch: int
    config_text: str
    tensors: dict  # name -> float32 array


def save_checkpoint(path, tensors, config_text, epoch):
    """Write parameters bitwise; arrays are stored as little-endian f32."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, epoch))
        cfg = config_text.encode("utf-8")
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(tensors[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read(f, count, what):
    data = f.read(count)
    if len(data) != count:
        raise CkptTruncatedError(f"{what}: wanted {count} bytes, got {len(data)}")
    return data


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = _read(f, 8, "magic")
        if magic != MAGIC:
            raise CkptMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, epoch = struct.unpack("<II", _read(f, 8, "header"))
        if version != VERSION:
            raise CkptVersionError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read(f, 4, "config length"))
        config_text = _read(f, cfg_len, "config").decode("utf-8")
        (count,) = struct.unpack("<I", _read(f, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read(f, 4, "name length"))
            name = _read(f, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read(f, 4, "ndim"))
            dims = struct.unpack(f"<{ndim}I", _read(f, 4 * ndim, "dims"))
            size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            payload = _read(f, 4 * size, f"payload of {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        trailing = f.read(1)
        if trailing:
            raise CkptTruncatedError("trailing bytes after last tensor")
    return Checkpoint(version=version, epoch=epoch, config_text=config_text, tensors=tensors)
