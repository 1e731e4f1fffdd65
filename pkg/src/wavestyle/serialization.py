"""WSTN binary tensor files.

Layout: ``b"WSTN"``, version byte (1), rank byte, ``rank`` little-endian
uint32 dims, then the row-major little-endian float64 payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"WSTN"
VERSION = 1


class TensorFormatError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(getattr(array, "data", array), dtype="<f8"))
    if arr.ndim > 255:
        raise TensorFormatError(f"rank {arr.ndim} does not fit in one byte")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise TensorFormatError("missing WSTN magic bytes")
    version, rank = struct.unpack_from("<BB", blob, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported WSTN version {version}")
    off = 6 + 4 * rank
    if len(blob) < off:
        raise TensorFormatError("truncated WSTN header")
    dims = struct.unpack_from(f"<{rank}I", blob, 6)
    count = int(np.prod(dims)) if rank else 1
    if len(blob) != off + 8 * count:
        raise TensorFormatError(
            f"payload size {len(blob) - off} does not match shape {tuple(dims)}")
    return np.frombuffer(blob, dtype="<f8", offset=off, count=count).astype(np.float64).reshape(dims)


def save_tensor(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
