"""Binary checkpoint files for named parameter arrays.

Layout, all little-endian:

    magic   4 bytes  b"ECMN"
    version u32      currently 1
    count   u32      number of arrays
    then per array, in storage order:
        name_len u16, name UTF-8 bytes,
        dtype     u8  (0 = float32, 1 = float64),
        rank      u8,
        extents   rank * u32,
        values    raw little-endian, C order

Round-trips are bit-exact; any structural problem raises CheckpointError.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ECMN"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(Exception):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:32]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"rank too large for {name}")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        chunks.append(le.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    if len(view) < 12 or bytes(view[:4]) != MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, off)
            off += 2
            name = bytes(view[off:off + name_len]).decode("utf-8")
            off += name_len
            code, rank = struct.unpack_from("<BB", view, off)
            off += 2
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"unknown dtype code {code} for {name}")
            shape = struct.unpack_from(f"<{rank}I", view, off)
            off += 4 * rank
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if off + nbytes > len(view):
                raise CheckpointError(f"truncated data for {name}")
            arr = np.frombuffer(view, dtype=dtype, count=nbytes // dtype.itemsize,
                                offset=off).reshape(shape)
            off += nbytes
            if name in arrays:
                raise CheckpointError(f"duplicate parameter {name}")
            arrays[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if off != len(view):
        raise CheckpointError(f"{len(view) - off} trailing bytes in checkpoint")
    return arrays
