"""Binary checkpoint format.

    magic "YLOS" | version u32 | tensor count u32
    per tensor: name length u32 | UTF-8 name | rank u32 | dims u64 * rank | float32 data
    CRC32 u32 of every preceding byte

All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from . import autodiff as ad

MAGIC = b"YLOS"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(params: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, t in params.items():
        arr = np.asarray(getattr(t, "data", t))
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch (file is corrupt)")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after the last tensor")
    return out


def save(path, params: dict) -> None:
    Path(path).write_bytes(encode(params))


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def load_params(path, requires_grad: bool = True) -> dict:
    return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in load(path).items()}


def quantize(params: dict) -> None:
    """Round parameters in place to what a save/load cycle would return."""
    for t in params.values():
        t.data = t.data.astype(np.float32).astype(np.float64)
