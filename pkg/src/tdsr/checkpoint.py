"""Versioned binary tensor checkpoints.

Layout (all integers little-endian)::

    b"TDSR" | u32 version | u32 count
    count x ( u32 name_len | name utf-8 | u8 dtype | u32 rank | rank x u32 dim | f32 payload )
    u32 crc32 of every preceding byte
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np
import torch

MAGIC = b"TDSR"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: dict[str, torch.Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        if not torch.is_floating_point(t):
            raise CheckpointError(f"{name}: only floating tensors are stored, got {t.dtype}")
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes) -> dict[str, torch.Tensor]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a TDSR checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, torch.Tensor] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            dtype, rank = struct.unpack_from("<BI", body, pos)
            pos += 5
            if dtype != DTYPE_F32:
                raise CheckpointError(f"{name}: unknown dtype tag {dtype}")
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            out[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated or malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return out


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(tensors: dict[str, torch.Tensor], path: str | Path) -> None:
    atomic_write_bytes(path, encode_tensors(tensors))


def load_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    return decode_tensors(Path(path).read_bytes())
