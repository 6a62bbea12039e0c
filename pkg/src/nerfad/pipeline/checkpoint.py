"""Versioned binary checkpoints.

Layout (little-endian)::

    b"NRAD" | u32 version | u32 header length | header JSON (utf-8)
    u32 tensor count
    per tensor: u16 name length | name | u32 ndim | ndim x u64 dims | float64 data

The header carries the stage tag, iteration, RNG state and optimizer step
counts; tensors hold model parameters and optimizer moments.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NRAD"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    stage: str
    iteration: int
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    rng_state: dict = field(default_factory=dict)
    optimizer_steps: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def header(self) -> dict:
        return {
            "stage": self.stage,
            "iteration": int(self.iteration),
            "rng_state": self.rng_state,
            "optimizer_steps": self.optimizer_steps,
            "meta": self.meta,
        }

    def group(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        """Tensors under ``prefix/`` with the prefix stripped."""
        p = prefix.rstrip("/") + "/"
        return OrderedDict((k[len(p):], v) for k, v in self.tensors.items() if k.startswith(p))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.header() != other.header() or self.version != other.version:
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        return all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(header)), header,
             struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointVersionError("not a checkpoint file (bad magic bytes)")
    r.take(4)
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(shape)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    return Checkpoint(
        stage=header["stage"], iteration=header["iteration"], tensors=tensors,
        rng_state=header["rng_state"], optimizer_steps=header["optimizer_steps"],
        meta=header.get("meta", {}), version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    return from_bytes(path.read_bytes())


def checkpoint_roundtrip(path) -> Checkpoint:
    """Load a checkpoint and verify that re-serialising reproduces the file exactly."""
    raw = Path(path).read_bytes()
    ckpt = from_bytes(raw)
    if to_bytes(ckpt) != raw:
        raise CheckpointError(f"{path}: re-serialisation is not byte-identical")
    return ckpt
