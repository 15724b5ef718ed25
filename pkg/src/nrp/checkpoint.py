"""NRPC checkpoint container and atomic file writes.

Layout (all integers little-endian): magic ``NRPC``, u32 format version,
u32 tensor count, then per tensor: u32 name length, UTF-8 name, u32 rank,
u64 extents, u8 dtype code (0 = f32, 1 = f64), raw little-endian values.
Tensors are written in sorted-name order, so identical states produce
identical bytes.  All writes go through write-temp-then-rename, so an
interrupted run never leaves a corrupt file behind.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"NRPC"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    """Unreadable, corrupt, or version-mismatched checkpoint."""


def atomic_write_bytes(path: str, payload: bytes):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def atomic_write_text(path: str, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def serialize_state(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name])
        code = _CODE_FOR_KIND.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(np.asarray(arr.shape, dtype="<u8").tobytes())
        parts.append(struct.pack("<B", code))
        parts.append(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())
    return b"".join(parts)


def deserialize_state(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("not an NRPC checkpoint (bad magic)")
    version, count = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    state: dict[str, np.ndarray] = {}
    off = 12
    for _ in range(count):
        try:
            (name_len,) = struct.unpack("<I", blob[off : off + 4])
            off += 4
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack("<I", blob[off : off + 4])
            off += 4
            shape = tuple(int(v) for v in np.frombuffer(blob[off : off + 8 * rank], dtype="<u8"))
            off += 8 * rank
            code = blob[off]
            off += 1
            if code not in _DTYPE_CODES:
                raise CheckpointError(f"unknown dtype code {code} for tensor {name!r}")
            dtype = _DTYPE_CODES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            chunk = blob[off : off + nbytes]
            if len(chunk) != nbytes:
                raise CheckpointError(f"truncated values for tensor {name!r}")
            values = np.frombuffer(chunk, dtype=dtype)
            off += nbytes
            state[name] = values.reshape(shape).copy()
        except struct.error as exc:
            raise CheckpointError(f"truncated checkpoint near offset {off}") from exc
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after last tensor")
    return state


def save_checkpoint(net, path: str):
    """Write a network's parameters and buffers (see networks.NetworkDef.state)."""
    atomic_write_bytes(path, serialize_state(net.state()))


def load_state(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return deserialize_state(fh.read())


def load_checkpoint(net, path: str):
    """Install a checkpoint into an existing network; the first name that
    does not line up (missing, extra, or mis-shaped) raises."""
    net.load_state(load_state(path))
    return net
