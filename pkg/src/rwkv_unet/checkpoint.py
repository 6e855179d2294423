"""Binary checkpoint container.

Layout (all little-endian): magic ``RWKVUNT1``, u32 version, u32 tensor count, then per
tensor u16 name length, UTF-8 name, u8 rank, u64 extents, u8 dtype code (0 f32, 1 f64)
and the raw payload; a trailing u64 holds the byte sum of all payloads mod 2**64.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RWKVUNT1"
VERSION = 1
META_NAME = "__meta__"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(Exception):
    """Base class for unreadable or incompatible checkpoints."""


class NotACheckpointError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _byte_sum(buf: bytes) -> int:
    return int(np.frombuffer(buf, dtype=np.uint8).sum(dtype=np.uint64))


def write_tensors(path: "str | os.PathLike", tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays; the file appears atomically via rename."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    checksum = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise TypeError(f"tensor {name!r}: only float32/float64 can be stored, got {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r}: name or rank too large")
        payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        chunks += [
            struct.pack("<H", len(raw)), raw,
            struct.pack("<B", arr.ndim), struct.pack(f"<{arr.ndim}Q", *arr.shape),
            struct.pack("<B", _CODES[arr.dtype]), payload,
        ]
        checksum = (checksum + _byte_sum(payload)) % 2**64
    chunks.append(struct.pack("<Q", checksum))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_tensors(path: "str | os.PathLike") -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    r = _Reader(buf)
    r.take(8)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    checksum = 0
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}Q")
        (code,) = r.unpack("<B")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dt = _DTYPES[code]
        payload = r.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
        checksum = (checksum + _byte_sum(payload)) % 2**64
        out[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    (stored,) = r.unpack("<Q")
    if stored != checksum:
        raise ChecksumError(f"{path}: checksum mismatch (stored {stored}, computed {checksum})")
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after checksum")
    return out


def model_state(model) -> dict[str, np.ndarray]:
    state = {name: t.data for name, t in model.named_parameters()}
    state[META_NAME] = np.array(
        [model.variant.code, model.in_channels, model.num_classes], dtype=np.float64
    )
    return state


def save_checkpoint(model, path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Store model parameters plus optional extra arrays (e.g. optimizer moments)."""
    state = model_state(model)
    for k, v in (extra or {}).items():
        if k in state:
            raise ValueError(f"extra entry {k!r} collides with a model tensor")
        state[k] = v
    write_tensors(path, state)


def assign_state(model, state: dict[str, np.ndarray]) -> None:
    """Copy stored arrays into an existing model, checking every shape first."""
    params = list(model.named_parameters())
    for name, t in params:
        if name not in state:
            raise CheckpointShapeError(f"checkpoint lacks tensor {name!r}")
        if state[name].shape != t.shape:
            raise CheckpointShapeError(
                f"shape mismatch at {name!r}: checkpoint {state[name].shape}, model {t.shape}"
            )
    for name, t in params:
        t.data = state[name].astype(t.dtype, copy=True)


def load_into(model, path) -> dict[str, np.ndarray]:
    """Load parameters into ``model``; returns the remaining (non-parameter) entries."""
    state = read_tensors(path)
    assign_state(model, state)
    names = {n for n, _ in model.named_parameters()}
    return {k: v for k, v in state.items() if k not in names and k != META_NAME}


def load_checkpoint(path):
    """Rebuild the model recorded in the checkpoint and load its parameters."""
    from .model import ModelVariant, build

    state = read_tensors(path)
    if META_NAME not in state:
        raise CheckpointError(f"{path}: no model description entry")
    code, cin, ncls = (int(v) for v in state[META_NAME])
    variants = list(ModelVariant)
    if not 0 <= code < len(variants):
        raise CheckpointError(f"{path}: unknown variant code {code}")
    first = next(v for k, v in state.items() if k != META_NAME)
    model = build(variants[code], cin, ncls, dtype=first.dtype)
    assign_state(model, state)
    return model
