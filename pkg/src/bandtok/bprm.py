"""BPRM named-tensor container.

Layout (little endian)::

    "BPRM" | u32 version | u32 tensor_count
    per tensor: u32 name_len | name (utf-8) | u32 rank | rank x u32 dims | f32 data

Tensors are written in insertion order so identical inputs give identical
bytes.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"BPRM"
VERSION = 1


def dumps(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(_to_numpy(value), dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(buf):
            raise FormatError(
                f"BPRM truncated at offset {off}: need {n} bytes for {what}, {len(buf) - off} left")
        chunk = buf[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad BPRM magic at offset 0")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported BPRM version {version} at offset 4")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        start = off
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid tensor name at offset {start}") from exc
        (rank,) = struct.unpack("<I", take(4, f"rank of {name!r}"))
        if rank > 16:
            raise FormatError(f"implausible rank {rank} for {name!r} at offset {off - 4}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * n, f"data of {name!r}"), dtype="<f4")
        out[name] = data.reshape(dims).astype(np.float64)
    if off != len(buf):
        raise FormatError(f"trailing bytes after last tensor at offset {off}")
    return out


def save(path, tensors: dict):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def _to_numpy(value):
    if hasattr(value, "detach"):
        return value.detach().cpu().numpy()
    return np.asarray(value)
