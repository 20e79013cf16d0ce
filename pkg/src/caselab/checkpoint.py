"""Binary container for named float32 tensors.

Layout (little-endian)::

    b"CASELAB1" | version u16 | entry count u32
    per entry: name length u16 | utf-8 name | rank u8 | dims u32 * rank | f32 payload, row-major
    CRC32 u32 of every preceding byte
"""
from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path
from typing import Mapping, Union

import numpy as np

MAGIC = b"CASELAB1"
VERSION = 1
MAX_RANK = 8
HEADER = struct.Struct("<8sHI")


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    names = list(tensors)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names")
    parts = [HEADER.pack(MAGIC, VERSION, len(names))]
    for name in names:
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"name too long: {name[:40]}...")
        if arr.ndim > MAX_RANK:
            raise CheckpointError(f"{name}: rank {arr.ndim} exceeds {MAX_RANK}")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < HEADER.size + 4:
        raise CheckpointError("truncated checkpoint: shorter than header")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt or truncated")
    magic, version, count = HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos, out = HEADER.size, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise CheckpointError("truncated entry name")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            if rank > MAX_RANK:
                raise CheckpointError(f"{name}: rank {rank} exceeds {MAX_RANK}")
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(body):
                raise CheckpointError(f"{name}: payload truncated")
            if name in out:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            out[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += nbytes
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from e
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after last entry")
    return out


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, np.ndarray]):
    """Write atomically: a temporary sibling file is renamed into place."""
    path = Path(path)
    blob = encode({k: (v.data if hasattr(v, "data") and not isinstance(v, np.ndarray) else v)
                   for k, v in tensors.items()})
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as f:
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: Union[str, Path]) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
