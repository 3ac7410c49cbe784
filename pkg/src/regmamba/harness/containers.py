"""Binary containers for arrays and checkpoints. All integers are little-endian.

Portable array (``.rma``)::

    magic    4 bytes  b"RMAR"
    version  u16      1
    dtype    u8       see DTYPE_CODES
    rank     u8
    dims     rank x u64
    payload  prod(dims) elements, C order, little-endian

Checkpoint (``.rmck``)::

    magic     4 bytes  b"RMCK"
    version   u16      1
    meta_len  u32
    meta      meta_len bytes of UTF-8 JSON (sorted keys, compact separators)
    n_arrays  u32
    n_arrays records of:
        name_len u16, name (UTF-8), then dtype/rank/dims/payload as in the array format
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np
import torch

ARRAY_MAGIC = b"RMAR"
CHECKPOINT_MAGIC = b"RMCK"
FORMAT_VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("uint8"): 4,
    np.dtype("<i4"): 5,
    np.dtype("bool"): 6,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class ContainerError(ValueError):
    pass


def _as_numpy(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    a = np.asarray(a)
    dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
    if dt not in DTYPE_CODES:
        raise ContainerError(f"unsupported dtype {a.dtype}")
    return np.asarray(a, dtype=dt, order="C")  # ascontiguousarray would promote 0-d to 1-d


def _write_body(fh: BinaryIO, a: np.ndarray) -> None:
    fh.write(struct.pack("<BB", DTYPE_CODES[a.dtype], a.ndim))
    fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fh.write(a.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise ContainerError("truncated container")
    return b


def _read_body(fh: BinaryIO) -> np.ndarray:
    code, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in CODE_DTYPES:
        raise ContainerError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    dt = CODE_DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    return np.frombuffer(_read_exact(fh, count * dt.itemsize), dtype=dt).reshape(dims).copy()


def _check_header(fh: BinaryIO, magic: bytes) -> None:
    if _read_exact(fh, 4) != magic:
        raise ContainerError(f"bad magic, expected {magic!r}")
    (version,) = struct.unpack("<H", _read_exact(fh, 2))
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported format version {version}")


def encode_array(a) -> bytes:
    buf = io.BytesIO()
    buf.write(ARRAY_MAGIC + struct.pack("<H", FORMAT_VERSION))
    _write_body(buf, _as_numpy(a))
    return buf.getvalue()


def decode_array(data: bytes) -> np.ndarray:
    fh = io.BytesIO(data)
    _check_header(fh, ARRAY_MAGIC)
    return _read_body(fh)


def save_array(path: str | Path, a) -> None:
    Path(path).write_bytes(encode_array(a))


def load_array(path: str | Path) -> np.ndarray:
    return decode_array(Path(path).read_bytes())


def encode_checkpoint(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    m = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(CHECKPOINT_MAGIC + struct.pack("<HI", FORMAT_VERSION, len(m)) + m)
    buf.write(struct.pack("<I", len(arrays)))
    for name, a in arrays.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        _write_body(buf, _as_numpy(a))
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    fh = io.BytesIO(data)
    _check_header(fh, CHECKPOINT_MAGIC)
    (mlen,) = struct.unpack("<I", _read_exact(fh, 4))
    meta = json.loads(_read_exact(fh, mlen).decode())
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    arrays = {}
    for _ in range(n):
        (ln,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, ln).decode()
        arrays[name] = _read_body(fh)
    if fh.read(1):
        raise ContainerError("trailing bytes after checkpoint payload")
    return meta, arrays
