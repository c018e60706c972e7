"""The "IVT1" tensor binary layout.

magic ``IVT1`` | u8 dtype code | u8 ndim | ndim x u32 LE extents | LE payload
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"IVT1"
DTYPE_F64 = 0


def encode(array) -> bytes:
    arr = np.asarray(array, dtype="<f8", order="C")
    if arr.ndim > 255:
        raise ValueError("IVT1 supports at most 255 axes")
    head = MAGIC + struct.pack("<BB", DTYPE_F64, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def decode(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ValueError("not an IVT1 tensor: bad magic")
    code, ndim = struct.unpack_from("<BB", blob, 4)
    if code != DTYPE_F64:
        raise ValueError(f"unsupported IVT1 dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}I", blob, 6)
    start = 6 + 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    payload = blob[start:]
    if len(payload) != 8 * count:
        raise ValueError(f"IVT1 payload has {len(payload)} bytes, expected {8 * count}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
