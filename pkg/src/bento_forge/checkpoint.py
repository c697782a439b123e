"""Binary named-array checkpoints.

Layout (all integers little-endian)::

    b"BNT1" | u32 version | u32 entry count
    per entry: u16 name length | name (UTF-8) | u8 dtype tag | u8 ndim
               | u32 dim * ndim | payload
    u32 CRC32 of everything before it

Dtype tags: 0 = float32 (parameters and optimizer moments), 1 = uint64
(counters), 2 = uint8 (raw bytes such as hashes and names). Training runs
in float64, so a resumed run continues from float32-rounded weights.
Entries are written in sorted name order so equal contents give equal
files.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"BNT1"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u8"), 2: np.dtype("u1")}
TAGS = {dt.str: tag for tag, dt in DTYPES.items()}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    """Named arrays plus the bookkeeping a resume needs."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    config_hash: bytes = b""
    pipeline: str = ""
    config_text: str = ""

    _META = ("meta.step", "meta.config_hash", "meta.pipeline", "meta.config")

    def entries(self) -> dict[str, np.ndarray]:
        out = {k: _canonical(k, v) for k, v in self.arrays.items()}
        out["meta.step"] = np.array([self.step], dtype="<u8")
        out["meta.config_hash"] = np.frombuffer(self.config_hash, dtype="u1")
        out["meta.pipeline"] = np.frombuffer(self.pipeline.encode("utf-8"), dtype="u1")
        out["meta.config"] = np.frombuffer(self.config_text.encode("utf-8"), dtype="u1")
        return out

    @classmethod
    def from_entries(cls, entries: Mapping[str, np.ndarray]) -> "Checkpoint":
        missing = [k for k in cls._META if k not in entries]
        if missing:
            raise CorruptCheckpointError(f"checkpoint lacks metadata entries {missing}")
        return cls(
            arrays={k: v for k, v in entries.items() if k not in cls._META},
            step=int(entries["meta.step"][0]),
            config_hash=entries["meta.config_hash"].tobytes(),
            pipeline=entries["meta.pipeline"].tobytes().decode("utf-8"),
            config_text=entries["meta.config"].tobytes().decode("utf-8"),
        )

    def check_config(self, config_hash: bytes, force: bool = False) -> None:
        if self.config_hash != config_hash and not force:
            raise ConfigMismatchError(
                f"checkpoint config hash {self.config_hash.hex()[:12]} differs from current "
                f"{config_hash.hex()[:12]}; use --force to resume anyway"
            )


def _canonical(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return arr.astype("<f4")
    if arr.dtype == np.uint8:
        return arr
    if arr.dtype.kind in "uib":
        if arr.size and arr.min() < 0:
            raise CheckpointError(f"{name}: negative integers cannot be stored")
        return arr.astype("<u8")
    raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")


def encode(ckpt: Checkpoint) -> bytes:
    entries = ckpt.entries()
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name in sorted(entries):
        arr = entries[name]
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: name or rank too large for the format")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", TAGS[arr.dtype.str], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        if len(data) < 4 and MAGIC.startswith(data):
            raise TruncatedCheckpointError("checkpoint truncated inside the magic bytes")
        raise BadMagicError(f"not a checkpoint: magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {VERSION}")
    (count,) = r.unpack("<I", "entry count")
    entries: dict[str, np.ndarray] = {}
    for k in range(count):
        (n,) = r.unpack("<H", f"entry {k} name length")
        name = r.take(n, f"entry {k} name").decode("utf-8")
        tag, ndim = r.unpack("<BB", f"{name} header")
        if tag not in DTYPES:
            raise CorruptCheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        dt = DTYPES[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        entries[name] = np.frombuffer(r.take(size, f"{name} payload"), dtype=dt).reshape(shape).copy()
    body_end = r.pos
    (crc,) = r.unpack("<I", "CRC32")
    if r.pos != len(data):
        raise CorruptCheckpointError(f"{len(data) - r.pos} trailing bytes after the CRC")
    if zlib.crc32(data[:body_end]) != crc:
        raise CorruptCheckpointError("CRC32 mismatch; checkpoint is corrupt")
    return Checkpoint.from_entries(entries)


def checkpoint_save(path: str | Path, ckpt: Checkpoint) -> None:
    """Atomic write: the target is replaced only once the file is complete."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def checkpoint_load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
