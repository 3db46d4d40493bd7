"""Binary checkpoint format.

Layout (all integers little-endian u32 unless noted):
  magic   8 bytes "RSMCKPT1"
  version u32 (currently 1)
  count   u32
  count entries of:
    name_len u32, name utf-8 bytes, rank u32, rank dims u32,
    prod(dims) float32 little-endian values

Values are always stored as float32 regardless of the compute dtype. The
loader validates magic, version, and that the payload is consumed exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"RSMCKPT1"
VERSION = 1


def save_checkpoint(model, path):
    """Write every named parameter of the model."""
    entries = model.named_parameters()
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, p in entries:
        raw = name.encode("utf-8")
        dims = p.shape
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path):
    """Return an ordered dict of name -> float32 array."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such checkpoint")
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {buf[:8]!r}")
    if len(buf) < 16:
        raise DataError(f"{path}: truncated checkpoint header")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    table = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
        except (struct.error, ValueError):
            raise DataError(f"{path}: truncated checkpoint entry") from None
        table[name] = arr.copy()
    if pos != len(buf):
        raise DataError(f"{path}: {len(buf) - pos} trailing bytes after last entry")
    return table


def load_checkpoint(model, path):
    """Fill the model's parameters in place from a checkpoint file."""
    table = read_checkpoint(path)
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(table))
    extra = sorted(set(table) - set(params))
    if missing or extra:
        raise DataError(
            f"{path}: parameter names do not match model "
            f"(missing {missing[:3]}..., extra {extra[:3]}...)"
            if len(missing) + len(extra) > 6 else
            f"{path}: parameter names do not match model (missing {missing}, extra {extra})"
        )
    for name, p in params.items():
        arr = table[name]
        if arr.shape != p.shape:
            raise DataError(f"{path}: '{name}' has shape {arr.shape}, expected {p.shape}")
        p.data = arr.astype(p.dtype)
    return model
