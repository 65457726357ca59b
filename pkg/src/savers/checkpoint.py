"""Binary checkpoint format.

Layout (all integers little-endian uint32)::

    b"SAVERS1"
    u32 len + canonical JSON model config
    u32 parameter count
    per parameter: u32 name len, name (utf-8), u32 rank, rank x u32 extents,
                   prod(extents) x float64 little-endian
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .net import SaversConfig, SaversModel

MAGIC = b"SAVERS1"


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def dumps(model: SaversModel) -> bytes:
    parts = [MAGIC]
    cfg = canonical_json(model.config.to_dict())
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        arr = model.params[name]
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape),
                  np.ascontiguousarray(arr, dtype="<f8").tobytes()]
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos, self.path)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def loads(data: bytes, path=None, expect: SaversConfig | None = None) -> SaversModel:
    r = _Reader(data, path)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic, not a SAVERS1 checkpoint", 0, path)
    cfg_off = r.pos
    try:
        config = SaversConfig.from_dict(json.loads(r.take(r.u32("config length"), "config")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"invalid config block ({exc})", cfg_off, path) from None
    if expect is not None and expect != config:
        raise ConfigError(f"checkpoint config {config} incompatible with expected {expect}")
    params = {}
    for _ in range(r.u32("parameter count")):
        name = r.take(r.u32("name length"), "name").decode()
        rank = r.u32(f"rank of {name}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"shape of {name}"))
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * count, f"data of {name}"), dtype="<f8") \
            .astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise FormatError("trailing bytes after last parameter", r.pos, path)
    try:
        return SaversModel(config, params)
    except ConfigError as exc:
        raise FormatError(f"parameter shapes inconsistent with config: {exc}", path=path) from None


def save_checkpoint(model: SaversModel, path) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(dumps(model))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expect: SaversConfig | None = None) -> SaversModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes(), path, expect)
