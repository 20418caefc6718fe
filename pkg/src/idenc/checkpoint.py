"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"IDEC" | u32 version | u32 len | header JSON (UTF-8) | u64 step | i64 seed
    u32 n_tensors, then per tensor:
        u32 len | name (UTF-8) | u8 dtype tag | u32 ndim | u32 dims... | payload

The header JSON carries the architecture descriptor under ``"model"`` plus
any extra metadata. Only float32 payloads (tag 0) are written.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

MAGIC = b"IDEC"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4")}


class CheckpointError(Exception):
    code = "checkpoint_error"


class BadMagicError(CheckpointError):
    code = "bad_magic"


class TruncatedCheckpointError(CheckpointError):
    code = "truncated"


class VersionMismatchError(CheckpointError):
    code = "version_mismatch"


class DescriptorMismatchError(CheckpointError):
    code = "descriptor_mismatch"


@dataclass
class Checkpoint:
    header: dict
    step: int
    seed: int
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def model(self) -> dict:
        return self.header.get("model", {})


def encode_checkpoint(tensors: Dict[str, np.ndarray], header: dict, step: int, seed: int) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<Qq", int(step), int(seed))]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        key = name.encode("utf-8")
        parts += [struct.pack("<I", len(key)), key, struct.pack("<BI", 0, arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(tensors: Dict[str, np.ndarray], header: dict, path, step: int = 0, seed: int = 0) -> Path:
    """Write atomically (temp file + rename) so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors, header, step, seed))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, file has {len(self.raw)}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}; not an IDEC checkpoint")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {VERSION}")
    (n,) = r.unpack("<I")
    header = json.loads(r.take(n).decode("utf-8"))
    step, seed = r.unpack("<Qq")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        tag, ndim = r.unpack("<BI")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I")
        dt = DTYPE_TAGS[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).astype(np.float32)
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after last tensor")
    return Checkpoint(header, step, seed, tensors)


def load_checkpoint(path, expect_model: Optional[dict] = None) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if expect_model is not None and ckpt.model != json.loads(json.dumps(expect_model)):
        raise DescriptorMismatchError(f"{path}: descriptor {ckpt.model} does not match expected {expect_model}")
    return ckpt
