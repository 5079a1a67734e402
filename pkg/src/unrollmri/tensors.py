"""Complex/real array containers and the on-disk tensor format.

Arrays are plain contiguous row-major numpy ndarrays. Two precisions are
supported throughout the package: 64-bit (float64/complex128, used by the
gradient checks) and 32-bit (float32/complex64, the faster training mode).
Complex scalars are interleaved (re, im) in memory, which makes the
complex <-> two-channel-real conversion a flat copy with no reordering.

On-disk format ("MTF"):
    bytes 0-7   magic ASCII "MODLTNSR"
    byte  8     version (currently 1)
    byte  9     dtype code: 0=real64, 1=complex64-pair (two f64), 2=real32,
                3=complex32-pair (two f32)
    byte  10    ndim (u8)
    bytes 11-15 zero padding
    then ndim little-endian u64 dims, then the payload as little-endian
    scalars, complex interleaved (re, im).
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DimensionError, FormatError, ParameterError

MAGIC = b"MODLTNSR"
VERSION = 1

_HEADER_LEN = 16

_DTYPE_BY_CODE = {
    0: np.dtype("<f8"),
    1: np.dtype("<c16"),
    2: np.dtype("<f4"),
    3: np.dtype("<c8"),
}
_CODE_BY_KIND = {("f", 8): 0, ("c", 16): 1, ("f", 4): 2, ("c", 8): 3}

_REAL_FOR_COMPLEX = {np.dtype(np.complex128): np.float64, np.dtype(np.complex64): np.float32}
_COMPLEX_FOR_REAL = {np.dtype(np.float64): np.complex128, np.dtype(np.float32): np.complex64}


def complex_to_channels(x):
    """Convert an H x W complex image to an H x W x 2 real array.

    Channel 0 holds the real part, channel 1 the imaginary part; the
    conversion is lossless and preserves precision (complex128 -> float64,
    complex64 -> float32).
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D complex image, got {x.ndim}-D")
    if x.dtype not in _REAL_FOR_COMPLEX:
        x = x.astype(np.complex128)
    real_dt = _REAL_FOR_COMPLEX[x.dtype]
    h, w = x.shape
    return np.ascontiguousarray(x).view(real_dt).reshape(h, w, 2).copy()


def channels_to_complex(r):
    """Exact inverse of :func:`complex_to_channels` (last dim must be 2)."""
    r = np.asarray(r)
    if r.ndim != 3 or r.shape[-1] != 2:
        raise DimensionError(f"expected shape (H, W, 2), got {r.shape}")
    if r.dtype not in _COMPLEX_FOR_REAL:
        r = r.astype(np.float64)
    cplx_dt = _COMPLEX_FOR_REAL[r.dtype]
    h, w = r.shape[:2]
    return np.ascontiguousarray(r).view(cplx_dt).reshape(h, w).copy()


def _dtype_code(dtype: np.dtype) -> int:
    key = (dtype.kind, dtype.itemsize)
    if key not in _CODE_BY_KIND:
        raise ParameterError(
            f"unsupported tensor dtype {dtype}; use float32/float64/complex64/complex128"
        )
    return _CODE_BY_KIND[key]


def tensor_save(t, path) -> None:
    """Write a tensor to ``path`` in the MTF format (bit-exact round trip)."""
    t = np.asarray(t)
    if t.ndim == 0:
        raise ParameterError("0-d tensors are not supported; reshape to (1,)")
    if t.ndim > 255:
        raise ParameterError("too many dimensions for the on-disk format")
    if any(d < 1 for d in t.shape):
        raise ParameterError(f"every dim must be >= 1, got shape {t.shape}")
    code = _dtype_code(t.dtype)
    header = MAGIC + bytes([VERSION, code, t.ndim]) + b"\x00" * 5
    dims = np.asarray(t.shape, dtype="<u8").tobytes()
    payload = np.ascontiguousarray(t, dtype=_DTYPE_BY_CODE[code]).tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(dims)
        f.write(payload)
    os.replace(tmp, path)


def tensor_load(path) -> np.ndarray:
    """Read a tensor written by :func:`tensor_save`.

    Raises :class:`FormatError` (with the offending byte offset) on bad
    magic, version mismatch, or a truncated/oversized payload.
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER_LEN:
        raise FormatError("truncated header", offset=len(data))
    if data[:8] != MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}", offset=0)
    if data[8] != VERSION:
        raise FormatError(f"unsupported version {data[8]}", offset=8)
    code = data[9]
    if code not in _DTYPE_BY_CODE:
        raise FormatError(f"unknown dtype code {code}", offset=9)
    ndim = data[10]
    if ndim == 0:
        raise FormatError("ndim must be >= 1", offset=10)
    if data[11:16] != b"\x00" * 5:
        raise FormatError("nonzero header padding", offset=11)
    dims_end = _HEADER_LEN + 8 * ndim
    if len(data) < dims_end:
        raise FormatError("truncated dims", offset=len(data))
    dims = np.frombuffer(data, dtype="<u8", count=ndim, offset=_HEADER_LEN)
    if (dims < 1).any():
        raise FormatError("dimension < 1 in header", offset=_HEADER_LEN)
    shape = tuple(int(d) for d in dims)
    count = int(np.prod(dims, dtype=np.uint64))
    dtype = _DTYPE_BY_CODE[code]
    expected = dims_end + count * dtype.itemsize
    if len(data) != expected:
        raise FormatError(
            f"payload length mismatch: file has {len(data)} bytes, expected {expected}",
            offset=min(len(data), expected),
        )
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=dims_end).reshape(shape)
    # copy out of the read-only buffer and normalize to native byte order
    return arr.astype(dtype.newbyteorder("="), copy=True)
