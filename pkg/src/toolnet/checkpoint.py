"""Binary checkpoint format.

Layout (all integers little-endian uint32)::

    b"TNCK" | version | len | arch tag (utf-8) | len | metadata JSON (utf-8)
    | tensor count | per tensor: len | name (utf-8) | rank | dims... | float32 data

The metadata JSON holds the ArchConfig fields plus the input normalisation
means, serialised with sorted keys so identical networks give identical bytes.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .arch import ArchConfig, Network, build_network

MAGIC = b"TNCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _u32(v: int) -> bytes:
    return struct.pack("<I", v)


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return _u32(len(b)) + b


def to_bytes(net: Network, means: Sequence[float] = (0.0, 0.0, 0.0)) -> bytes:
    meta = {"config": net.cfg.to_dict(), "means": [float(m) for m in means], "seed": net.seed}
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_u32(VERSION))
    buf.write(_str(net.arch))
    buf.write(_str(json.dumps(meta, sort_keys=True, separators=(",", ":"))))
    buf.write(_u32(len(net.params)))
    for name, p in net.params.items():
        buf.write(_str(name))
        buf.write(_u32(p.data.ndim))
        for d in p.shape:
            buf.write(_u32(d))
        buf.write(np.asarray(p.data, dtype="<f4").tobytes())
    return buf.getvalue()


def save(net: Network, path, means: Sequence[float] = (0.0, 0.0, 0.0)) -> None:
    Path(path).write_bytes(to_bytes(net, means))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def str(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def from_bytes(data: bytes, path: str = "<bytes>", dtype=np.float64):
    """Returns ``(network, means)``."""
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    arch = r.str()
    meta = json.loads(r.str())
    cfg = ArchConfig.from_dict(meta["config"])
    arrays = {}
    for _ in range(r.u32()):
        name = r.str()
        dims = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        arrays[name] = arr.astype(dtype)
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    net = build_network(arch, cfg, seed=meta.get("seed", 0), initialize=False)
    net.load_arrays(arrays)
    if dtype != np.float64:
        net.astype(dtype)
    return net, tuple(meta["means"])


def load(path, dtype=np.float64):
    path = Path(path)
    return from_bytes(path.read_bytes(), str(path), dtype)
