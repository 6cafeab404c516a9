"""Compact bit-packed storage for arbitrary-width elements.

Element ``k`` of a buffer occupies bits ``[k*bits, (k+1)*bits)`` of the
buffer's bit stream, least-significant bit first: bit ``p`` of the stream is
bit ``p % 8`` of byte ``p // 8``. Elements may straddle a byte boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dtypes import ScalarType, as_dtype, decode_array, encode_array

__all__ = [
    "PackedBuffer",
    "PackingError",
    "load_element",
    "store_element",
    "gather_codes",
    "scatter_codes",
    "pack_codes",
    "unpack_codes",
    "cast_buffer",
    "dequantize",
    "quantize",
]


class PackingError(ValueError):
    pass


def packed_nbytes(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


@dataclass
class PackedBuffer:
    """``count`` elements of ``dtype``, packed without gaps into ``data``."""

    dtype: ScalarType
    shape: tuple[int, ...]
    data: bytearray = field(default=None)

    def __post_init__(self):
        self.dtype = as_dtype(self.dtype)
        self.shape = tuple(int(s) for s in self.shape)
        n = packed_nbytes(self.count, self.dtype.bits)
        if self.data is None:
            self.data = bytearray(n)
        else:
            self.data = bytearray(self.data)
            if len(self.data) != n:
                raise PackingError(
                    f"{self.dtype.name}{list(self.shape)} needs {n} bytes, got {len(self.data)}")

    @property
    def count(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return len(self.data)

    @classmethod
    def from_codes(cls, dtype, codes, shape=None) -> "PackedBuffer":
        dtype = as_dtype(dtype)
        codes = np.asarray(codes, dtype=np.uint64)
        shape = codes.shape if shape is None else tuple(shape)
        return cls(dtype, shape, pack_codes(codes.reshape(-1), dtype.bits))

    @classmethod
    def from_values(cls, dtype, values, shape=None) -> "PackedBuffer":
        dtype = as_dtype(dtype)
        values = np.asarray(values)
        return cls.from_codes(dtype, encode_array(dtype, values), values.shape if shape is None else shape)

    def codes(self) -> np.ndarray:
        return unpack_codes(self.data, self.dtype.bits, self.count).reshape(self.shape)

    def values(self) -> np.ndarray:
        return decode_array(self.dtype, self.codes())

    def to_numpy(self) -> np.ndarray:
        """Values as the matching numpy dtype (standard types) or float64/int64."""
        npd = self.dtype.numpy_dtype()
        vals = self.values()
        return vals.astype(npd) if npd is not None else vals

    def copy(self) -> "PackedBuffer":
        return PackedBuffer(self.dtype, self.shape, bytearray(self.data))

    def __eq__(self, other):
        return (isinstance(other, PackedBuffer) and self.dtype == other.dtype
                and self.shape == other.shape and self.data == other.data)


# -- scalar bit access ------------------------------------------------------

def _check_index(buf: PackedBuffer, k: int):
    if not 0 <= k < buf.count:
        raise PackingError(f"element index {k} out of range [0, {buf.count})")


def load_element(buf: PackedBuffer, k: int) -> int:
    """Raw bits of element ``k``, stitched together byte by byte."""
    _check_index(buf, k)
    bits = buf.dtype.bits
    pos = k * bits
    raw = 0
    got = 0
    while got < bits:
        byte = pos >> 3
        shift = pos & 7
        take = min(8 - shift, bits - got)
        part = (buf.data[byte] >> shift) & ((1 << take) - 1)
        raw |= part << got
        got += take
        pos += take
    return raw


def store_element(buf: PackedBuffer, k: int, raw: int) -> None:
    """Overwrite element ``k`` in place, leaving every other bit untouched."""
    _check_index(buf, k)
    bits = buf.dtype.bits
    raw = int(raw)
    if not 0 <= raw < (1 << bits):
        raise PackingError(f"value {raw:#x} does not fit in {bits} bits")
    pos = k * bits
    done = 0
    while done < bits:
        byte = pos >> 3
        shift = pos & 7
        take = min(8 - shift, bits - done)
        mask = ((1 << take) - 1) << shift
        part = ((raw >> done) & ((1 << take) - 1)) << shift
        buf.data[byte] = (buf.data[byte] & ~mask & 0xFF) | part
        done += take
        pos += take


# -- vectorized bit access --------------------------------------------------

def _as_u8(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return data.view(np.uint8).reshape(-1)
    return np.frombuffer(data, dtype=np.uint8)


def gather_codes(data, bit_offsets: np.ndarray, bits: int) -> np.ndarray:
    """Read ``bits``-wide fields starting at each bit offset."""
    buf = _as_u8(data)
    off = np.asarray(bit_offsets, dtype=np.int64)
    if bits % 8 == 0 and not np.any(off & 7):
        nb = bits // 8
        start = off >> 3
        out = np.zeros(off.shape, dtype=np.uint64)
        for j in range(nb):
            out |= buf[start + j].astype(np.uint64) << np.uint64(8 * j)
        return out
    if bits > 56:
        raise PackingError("unaligned fields wider than 56 bits are not supported")
    start = off >> 3
    shift = (off & 7).astype(np.uint64)
    span = (bits + 7 + 7) // 8
    word = np.zeros(off.shape, dtype=np.uint64)
    for j in range(span):
        idx = start + j
        ok = idx < buf.size
        byte = np.where(ok, buf[np.minimum(idx, buf.size - 1)], 0).astype(np.uint64)
        word |= byte << np.uint64(8 * j)
    return (word >> shift) & np.uint64((1 << bits) - 1)


def scatter_codes(data: bytearray, bit_offsets: np.ndarray, codes: np.ndarray, bits: int) -> None:
    """Write fields in place; offsets must not overlap."""
    buf = np.frombuffer(data, dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    off = np.asarray(bit_offsets, dtype=np.int64).reshape(-1)
    codes = np.asarray(codes, dtype=np.uint64).reshape(-1)
    if bits % 8 == 0 and not np.any(off & 7):
        start = off >> 3
        for j in range(bits // 8):
            buf[start + j] = ((codes >> np.uint64(8 * j)) & np.uint64(0xFF)).astype(np.uint8)
        return
    # per-bit scatter keeps the neighbouring fields intact
    j = np.arange(bits, dtype=np.int64)
    pos = (off[:, None] + j[None, :]).reshape(-1)
    bitv = ((codes[:, None] >> j[None, :].astype(np.uint64)) & np.uint64(1)).reshape(-1).astype(np.uint8)
    byte = pos >> 3
    sh = (pos & 7).astype(np.uint8)
    np.bitwise_and.at(buf, byte, ~(np.uint8(1) << sh))
    np.bitwise_or.at(buf, byte, bitv << sh)


def pack_codes(codes: np.ndarray, bits: int) -> bytearray:
    codes = np.asarray(codes, dtype=np.uint64).reshape(-1)
    n = packed_nbytes(codes.size, bits)
    if bits == 8:
        return bytearray(codes.astype(np.uint8).tobytes())
    j = np.arange(bits, dtype=np.uint64)
    stream = ((codes[:, None] >> j[None, :]) & np.uint64(1)).astype(np.uint8).reshape(-1)
    out = np.packbits(stream, bitorder="little")
    return bytearray(out.tobytes()[:n].ljust(n, b"\0"))


def unpack_codes(data, bits: int, count: int) -> np.ndarray:
    buf = _as_u8(data)
    if bits == 8:
        return buf[:count].astype(np.uint64)
    stream = np.unpackbits(buf, bitorder="little")[: count * bits].astype(np.uint64)
    stream = stream.reshape(count, bits)
    weights = np.uint64(1) << np.arange(bits, dtype=np.uint64)
    return (stream * weights).sum(axis=1, dtype=np.uint64)


# -- value-level operations -------------------------------------------------

def cast_buffer(src: PackedBuffer, to) -> PackedBuffer:
    """Elementwise decode then encode into ``to``."""
    to = as_dtype(to)
    if to == src.dtype:
        return src.copy()
    return PackedBuffer.from_codes(to, encode_array(to, src.values()), src.shape)


def dequantize(w: PackedBuffer, scale: Sequence[float], group_size: int) -> np.ndarray:
    """``out[k] = decode(w[k]) * scale[k // group_size]`` over the flat element order.

    The product is rounded to float32.
    """
    if group_size < 1 or w.count % group_size:
        raise PackingError(f"element count {w.count} not divisible by group size {group_size}")
    scale = np.asarray(scale, dtype=np.float32).reshape(-1)
    if scale.size != w.count // group_size:
        raise PackingError(f"expected {w.count // group_size} scales, got {scale.size}")
    vals = w.values().reshape(-1).astype(np.float32)
    return (vals * np.repeat(scale, group_size)).astype(np.float32)


def quantize(x: np.ndarray, dtype, group_size: Optional[int] = None):
    """Symmetric per-group quantization of a 2-D ``[rows, cols]`` array.

    Groups run down the rows of each column (``group_size`` consecutive rows
    share one scale per column). Returns the packed codes and float32 scales
    of shape ``[rows // group_size, cols]``. Without ``group_size`` every
    scale is 1.0 and values are encoded directly.
    """
    dtype = as_dtype(dtype)
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.ndim != 2:
        raise PackingError("quantize expects a 1-D or 2-D array")
    rows, cols = x.shape
    if group_size is None:
        scales = np.ones((1, cols), dtype=np.float32)
        return PackedBuffer.from_values(dtype, x), scales
    if group_size < 1 or rows % group_size:
        raise PackingError(f"{rows} rows not divisible by group size {group_size}")
    g = x.reshape(rows // group_size, group_size, cols)
    amax = np.abs(g).max(axis=1)
    qmax = np.float32(dtype.max_value)
    scales = np.where(amax > 0, amax / qmax, np.float32(1.0)).astype(np.float32)
    q = (g / scales[:, None, :]).reshape(rows, cols)
    return PackedBuffer.from_values(dtype, q), scales
