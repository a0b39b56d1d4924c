"""Binary checkpoint container for named tensors plus JSON metadata.

Layout (all integers little-endian):
  magic "MCMD" | version u32 | tensor count u32 |
  per tensor: name length u16, UTF-8 name, rank u8, dims u32 each,
              dtype code u8 (0 = f32 LE), raw payload |
  metadata length u32, UTF-8 JSON blob.

Metadata JSON is serialized canonically (sorted keys, no whitespace) so a
load -> save round trip is byte-identical.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"MCMD"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


def canonical_json(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, tensors: "OrderedDict[str, np.ndarray] | dict", meta: dict) -> None:
    """Write named f32 arrays and a metadata dict to one file."""
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"rank {arr.ndim} exceeds format limit")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            parts.append(struct.pack("<I", d))
        parts.append(struct.pack("<B", DTYPE_F32))
        parts.append(arr.tobytes(order="C"))
    blob = canonical_json(meta)
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    """Read back (tensors, metadata); inverse of save_checkpoint."""
    with open(path, "rb") as f:
        buf = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        out = buf[off:off + n]
        off += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError("bad magic bytes (not an MCMD checkpoint)")
    version = struct.unpack("<I", take(4))[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    count = struct.unpack("<I", take(4))[0]
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        nlen = struct.unpack("<H", take(2))[0]
        name = take(nlen).decode("utf-8")
        rank = struct.unpack("<B", take(1))[0]
        dims = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        dtype = struct.unpack("<B", take(1))[0]
        if dtype != DTYPE_F32:
            raise CheckpointError(f"unknown dtype code {dtype} for tensor {name!r}")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = take(size * 4)
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = arr
    blen = struct.unpack("<I", take(4))[0]
    try:
        meta = json.loads(take(blen).decode("utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"bad metadata JSON: {e}") from e
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after metadata")
    return tensors, meta
