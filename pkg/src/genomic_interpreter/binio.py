"""Little-endian binary layout shared by checkpoints, datasets and atlas files.

Array block::

    u64 ndim
    u64 dim[0] ... u64 dim[ndim-1]
    f64 values[prod(dims)]          row-major

Checkpoint file::

    8 bytes  magic b"GINTCKPT"
    u64      format version (1)
    u64      length of config JSON, then the UTF-8 JSON itself
    u64      tensor count
    per tensor: u64 name length, UTF-8 name, array block
"""

from __future__ import annotations

import io
import json
import struct
from typing import BinaryIO

import numpy as np

from .errors import ConsistencyError, FormatError, PayloadError, VersionError

CKPT_MAGIC = b"GINTCKPT"
CKPT_VERSION = 1


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise PayloadError(f"truncated while reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def write_u64(f: BinaryIO, v: int) -> None:
    f.write(struct.pack("<Q", v))


def read_u64(f: BinaryIO, what: str = "integer") -> int:
    return struct.unpack("<Q", _read_exact(f, 8, what))[0]


def write_array(f: BinaryIO, a: np.ndarray) -> None:
    a = np.asarray(a, dtype="<f8")
    write_u64(f, a.ndim)
    for s in a.shape:
        write_u64(f, s)
    f.write(np.ascontiguousarray(a).tobytes())


def read_array(f: BinaryIO, what: str = "array") -> np.ndarray:
    ndim = read_u64(f, f"{what} rank")
    if ndim > 16:
        raise ConsistencyError(f"{what}: implausible rank {ndim}")
    shape = tuple(read_u64(f, f"{what} shape") for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(f, 8 * count, f"{what} values")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def array_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_array(buf, a)
    return buf.getvalue()


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    blob = json.dumps(config, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        write_u64(f, CKPT_VERSION)
        write_u64(f, len(blob))
        f.write(blob)
        write_u64(f, len(tensors))
        for name, arr in tensors.items():
            raw = name.encode()
            write_u64(f, len(raw))
            f.write(raw)
            write_array(f, arr)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        version = read_u64(f, "version")
        if version != CKPT_VERSION:
            raise VersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
        config = json.loads(_read_exact(f, read_u64(f, "config length"), "config"))
        tensors = {}
        for _ in range(read_u64(f, "tensor count")):
            name = _read_exact(f, read_u64(f, "name length"), "name").decode()
            tensors[name] = read_array(f, name)
    return config, tensors
