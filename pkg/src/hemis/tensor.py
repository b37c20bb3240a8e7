"""Tensor plumbing: construction helpers, seeded RNG and the HTF binary format.

Tensors are plain row-major :class:`numpy.ndarray` objects. The helpers here
add the checks the rest of the package relies on (positive shapes, finite
values) and a small bit-exact file format.

HTF layout (all integers little-endian)::

    bytes 0-3   magic b"HTF1"
    byte  4     dtype code (1 = float32, 2 = float64)
    byte  5     rank R (1..8)
    R x u64     dims
    payload     row-major IEEE-754 values
"""
from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Sequence

import numpy as np

HTF_MAGIC = b"HTF1"
MAX_RANK = 8

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    """Base class for malformed artifact files."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class UnknownDtypeError(FormatError):
    pass


class MissingEntryError(FormatError):
    pass


class VersionError(FormatError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator backed by PCG64.

    PCG64 and numpy's Generator sampling routines produce identical streams on
    every platform for a given seed, which the training determinism contract
    depends on.
    """
    return np.random.Generator(np.random.PCG64(seed))


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise ValueError("shape must contain at least one dimension")
    if any(d < 1 for d in shape):
        raise ValueError(f"all dimensions must be >= 1, got {shape}")
    return shape


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise FloatingPointError(f"non-finite values in {what}")
    return t


def zeros(shape: Sequence[int], dtype=np.float32) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=dtype)


def randn(shape: Sequence[int], rng: np.random.Generator, stddev: float = 1.0,
          dtype=np.float32) -> np.ndarray:
    """Normal(0, stddev**2) samples; drawn in float64 then cast."""
    if not stddev > 0:
        raise ValueError(f"stddev must be positive, got {stddev}")
    shape = _check_shape(shape)
    return (rng.standard_normal(shape) * stddev).astype(dtype)


def elementwise(op: str, a: np.ndarray, b) -> np.ndarray:
    """Pointwise add/sub/mul between equal-shape tensors, or scale by a scalar.

    No broadcasting: tensor operands must have identical shapes.
    """
    a = np.asarray(a)
    if op == "scale":
        if np.ndim(b) != 0:
            raise ValueError("scale expects a scalar operand")
        out = a * a.dtype.type(b)
    else:
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
        if op == "add":
            out = a + b
        elif op == "sub":
            out = a - b
        elif op == "mul":
            out = a * b
        else:
            raise ValueError(f"unknown op {op!r}")
    return check_finite(out, f"elementwise {op}")


# --- HTF serialization -----------------------------------------------------

def htf_bytes(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    code = _DTYPE_CODES.get(t.dtype)
    if code is None:
        raise TypeError(f"HTF supports float32/float64 only, got {t.dtype}")
    if not 1 <= t.ndim <= MAX_RANK:
        raise ValueError(f"HTF rank must be 1..{MAX_RANK}, got {t.ndim}")
    header = HTF_MAGIC + struct.pack("<BB", code, t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype=_CODE_DTYPES[code]).tobytes()
    return header + payload


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"truncated HTF data while reading {what}")
    return buf


def read_htf(stream: BinaryIO) -> np.ndarray:
    """Read one HTF blob from the current stream position."""
    magic = stream.read(4)
    if len(magic) < 4:
        raise TruncatedFileError("truncated HTF data while reading magic")
    if magic != HTF_MAGIC:
        raise BadMagicError(f"bad HTF magic {magic!r}")
    code, rank = struct.unpack("<BB", _read_exact(stream, 2, "header"))
    if code not in _CODE_DTYPES:
        raise UnknownDtypeError(f"unknown HTF dtype code {code}")
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"invalid HTF rank {rank}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank, "dims"))
    if any(d < 1 for d in dims):
        raise FormatError(f"invalid HTF dims {dims}")
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims))
    payload = _read_exact(stream, count * dtype.itemsize, "payload")
    return np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="))\
        .reshape(dims)


def save_htf(t: np.ndarray, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(htf_bytes(t))


def load_htf(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    stream = io.BytesIO(data)
    t = read_htf(stream)
    if stream.tell() != len(data):
        raise FormatError(f"trailing bytes after HTF payload in {path}")
    return t
