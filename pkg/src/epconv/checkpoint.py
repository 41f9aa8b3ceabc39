"""Binary checkpoints for parameters.

Simple little-endian container: magic, version, run metadata, then each
array with a dtype/shape header and raw C-order payload, and a trailing
CRC32 over everything after the magic.  Loading validates all of it and
fails loudly rather than returning questionable weights.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from epconv.dynamics import Parameters

MAGIC = b"EPCV"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint file."""


def save_checkpoint(path, params: Parameters, epoch: int = 0, seed: int = 0):
    body = bytearray()
    body += struct.pack("<HII", VERSION, epoch, seed & 0xFFFFFFFF)
    arrays = []
    for w, b in zip(params.weights, params.biases):
        arrays.append((0, w))
        arrays.append((1, b))
    body += struct.pack("<I", len(arrays))
    for kind, arr in arrays:
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype}")
        body += struct.pack("<BBB", kind, _DTYPE_CODES[arr.dtype], arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    crc = zlib.crc32(bytes(body))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(body)
        f.write(struct.pack("<I", crc))


def load_checkpoint(path):
    """Returns (Parameters, meta dict with epoch and seed)."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt")
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(body):
            raise CheckpointError(f"{path}: truncated header")
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals

    version, epoch, seed = take("<HII")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (n_arrays,) = take("<I")
    weights, biases = [], []
    for _ in range(n_arrays):
        kind, dcode, ndim = take("<BBB")
        if dcode not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {dcode}")
        shape = take(f"<{ndim}I")
        dtype = _DTYPES[dcode]
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if off + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated array payload")
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=off).reshape(shape)
        off += nbytes
        arr = arr.astype(dtype.newbyteorder("="))
        (weights if kind == 0 else biases).append(arr)
    if len(weights) != len(biases):
        raise CheckpointError(f"{path}: unbalanced weight/bias arrays")
    return Parameters(weights, biases), {"epoch": epoch, "seed": seed}
