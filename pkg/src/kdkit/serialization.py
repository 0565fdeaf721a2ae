"""Binary named-tensor-map format shared by the cache store and checkpoints.

Layout (all integers little-endian):

    b'KDT1' | u32 n_entries
    per entry:
        u16 name_len | name utf-8
        u8 dtype code | u8 ndim | u64 * ndim shape
        u64 payload bytes | raw little-endian IEEE-754 / integer data

The format round-trips bit-exactly and has no pickle surface.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .errors import StorageError

MAGIC = b"KDT1"

_DTYPE_CODES = {
    torch.float32: 0,
    torch.float64: 1,
    torch.float16: 2,
    torch.int64: 3,
    torch.int32: 4,
    torch.int16: 5,
    torch.uint8: 6,
    torch.bool: 7,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

_NP_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<f2"),
    3: np.dtype("<i8"),
    4: np.dtype("<i4"),
    5: np.dtype("<i2"),
    6: np.dtype("u1"),
    7: np.dtype("?"),
}


def dump_tensors(tensors: dict[str, torch.Tensor]) -> bytes:
    """Serialize a named tensor map to bytes."""
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        if not isinstance(t, torch.Tensor):
            raise StorageError(f"entry '{name}' is not a tensor ({type(t).__name__})")
        if t.dtype not in _DTYPE_CODES:
            raise StorageError(f"entry '{name}' has unsupported dtype {t.dtype}")
        code = _DTYPE_CODES[t.dtype]
        arr = t.detach().cpu().contiguous().numpy()
        arr = arr.astype(_NP_DTYPES[code], copy=False)  # force little-endian
        raw = arr.tobytes()
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
    return b"".join(chunks)


def load_tensors(data: bytes) -> dict[str, torch.Tensor]:
    """Parse bytes produced by :func:`dump_tensors`."""
    try:
        if data[:4] != MAGIC:
            raise StorageError("bad magic; not a tensor-map blob")
        off = 4
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        out: dict[str, torch.Tensor] = {}
        for _ in range(n):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode("utf-8")
            off += name_len
            code, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, off)
            off += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", data, off)
            off += 8
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            if nbytes != count * _NP_DTYPES[code].itemsize:
                raise StorageError(
                    f"entry '{name}': payload {nbytes} bytes, expected "
                    f"{count * _NP_DTYPES[code].itemsize}"
                )
            arr = np.frombuffer(data, dtype=_NP_DTYPES[code], count=count, offset=off)
            arr = arr.reshape(shape)
            off += nbytes
            out[name] = torch.from_numpy(arr.copy()).to(_CODE_DTYPES[code])
        return out
    except (struct.error, ValueError, IndexError, KeyError, UnicodeDecodeError) as exc:
        raise StorageError(f"corrupt tensor-map blob: {exc}") from exc


def save_tensor_file(path: str | Path, tensors: dict[str, torch.Tensor]) -> None:
    """Write a tensor map to disk atomically (tmp + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(dump_tensors(tensors))
        tmp.replace(path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def load_tensor_file(path: str | Path) -> dict[str, torch.Tensor]:
    """Read a tensor map written by :func:`save_tensor_file`."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    return load_tensors(data)
