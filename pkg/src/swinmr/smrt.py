"""SMRT1 binary tensor files.

Layout (all little-endian)::

    b"SMRT1"            magic, 5 bytes
    u8  flags           bit 0 set -> complex payload (trailing re/im axis of size 2)
    u8  rank            rank of the stored array, including the re/im axis
    u64 * rank          dimensions
    f32 * prod(dims)    row-major payload
"""
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SMRT1"
FLAG_COMPLEX = 0x01


class FormatError(ValueError):
    """Malformed file contents."""


def encode(array) -> bytes:
    arr = np.asarray(array)
    flags = 0
    if np.iscomplexobj(arr):
        arr = np.stack([arr.real, arr.imag], axis=-1)
        flags |= FLAG_COMPLEX
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise ValueError("rank above 255 is not representable")
    header = MAGIC + struct.pack("<BB", flags, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:5] != MAGIC:
        raise FormatError("bad magic at offset 0, expected SMRT1")
    if len(buf) < 7:
        raise FormatError("truncated header at offset 5")
    flags, rank = struct.unpack_from("<BB", buf, 5)
    off = 7
    if len(buf) < off + 8 * rank:
        raise FormatError(f"truncated dimension table at offset {off}")
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = off + 4 * count
    if len(buf) != expected:
        raise FormatError(f"payload size mismatch at offset {off}: file has {len(buf)} bytes, header implies {expected}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)
    if flags & FLAG_COMPLEX:
        if rank == 0 or dims[-1] != 2:
            raise FormatError("complex flag set but trailing dimension is not 2")
        arr = (arr[..., 0] + 1j * arr[..., 1]).astype(np.complex64)
    return arr


def save(path, array) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(array))
    return path


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_with_sidecar(path, array, meta: dict) -> Path:
    path = save(path, array)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_sidecar(path) -> dict:
    return json.loads(sidecar_path(path).read_text())
