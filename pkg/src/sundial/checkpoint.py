"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SNDL"                      magic
    u32 format_version
    u32 config_len, bytes        canonical JSON of ModelConfig (UTF-8)
    u32 n_tensors
    per tensor: u32 name_len, name (UTF-8), u32 ndim, u32 * ndim extents, u64 byte offset
    payload                      float32 blobs at the recorded absolute offsets

Optimizer state is not stored.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from sundial.config import ConfigError, ModelConfig
from sundial.model import SundialModel

MAGIC = b"SNDL"
VERSION = 1


class CheckpointError(ValueError):
    pass


class FormatError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class CorruptionError(CheckpointError):
    pass


def _header(cfg_bytes: bytes, table: list[tuple[bytes, tuple]]) -> int:
    size = 4 + 4 + 4 + len(cfg_bytes) + 4
    for name, shape in table:
        size += 4 + len(name) + 4 + 4 * len(shape) + 8
    return size


def save(model: SundialModel, path) -> None:
    cfg_bytes = model.cfg.to_json().encode("utf-8")
    named = [(n.encode("utf-8"), p.data.astype("<f4")) for n, p in model.named_parameters()]
    table = [(n, a.shape) for n, a in named]
    offset = _header(cfg_bytes, table)
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg_bytes)), cfg_bytes,
             struct.pack("<I", len(named))]
    for name, arr in named:
        parts.append(struct.pack("<I", len(name)) + name + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", offset))
        offset += arr.nbytes
    parts.extend(a.tobytes() for _, a in named)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError(f"file truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load(path) -> SundialModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"{path}: unsupported format version {version} (expected {VERSION})")
    try:
        cfg = ModelConfig.from_json(r.take(r.u32()).decode("utf-8"))
    except (ValueError, ConfigError) as e:
        raise CorruptionError(f"{path}: unreadable config ({e})") from e
    n = r.u32()
    state = {}
    for _ in range(n):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        off = r.u64()
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(buf):
            raise CorruptionError(f"{path}: tensor {name!r} runs past end of file")
        state[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
    model = SundialModel(cfg)
    own = dict(model.named_parameters())
    for name in own:
        if name not in state:
            raise CorruptionError(f"{path}: tensor {name!r} missing from table")
        if tuple(own[name].shape) != tuple(state[name].shape):
            raise CorruptionError(f"{path}: tensor {name!r} has shape {state[name].shape}, "
                                  f"config implies {own[name].shape}")
    extra = set(state) - set(own)
    if extra:
        raise CorruptionError(f"{path}: unexpected tensors {sorted(extra)}")
    model.load_state_dict({k: v.astype(np.float32) for k, v in state.items()})
    return model
