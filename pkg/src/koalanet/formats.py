"""Little-endian tensor container used for checkpoints and kernel files.

Layout::

    b"KOALA1\\0\\0"                        magic, 8 bytes
    u32 entry count
    per entry:
        u16 name length, UTF-8 name
        u8 rank, u32 dims[rank]
        f32 payload, row-major
"""
from __future__ import annotations

import struct
import warnings
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"KOALA1\x00\x00"


class FormatError(ValueError):
    pass


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise FormatError("rank exceeds 255")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:8] != MAGIC:
        raise FormatError("bad magic; not a KOALA1 container")
    pos = 8
    try:
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise FormatError(f"truncated payload for {name!r}")
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
            out[name] = arr.astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise FormatError(f"truncated container: {exc}") from None
    if pos != len(buf):
        raise FormatError("trailing bytes after last entry")
    return out


def save(path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(entries))


def load(path) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())


def save_kernel(path, kernel: np.ndarray) -> None:
    save(path, {"kernel": np.asarray(kernel)})


def load_kernel(path) -> np.ndarray:
    entries = load(path)
    if list(entries) != ["kernel"]:
        raise FormatError(f"{path}: expected a single 'kernel' entry")
    k = entries["kernel"]
    if k.ndim != 2:
        raise FormatError(f"{path}: kernel must be 2-D, got {k.shape}")
    total = float(k.astype(np.float64).sum())
    if abs(total - 1.0) > 1e-5:
        warnings.warn(f"{path}: kernel sums to {total:.6f}, not 1", stacklevel=2)
    return k
