"""Offline weight re-layout for low-precision matmul kernels.

A weight tile of ``BK x BN`` low-precision elements is held in registers under
a distributed layout. ``transform_weights`` reorders each tile's bits so that
loading the tile's bytes contiguously as ``u8`` under
:func:`compatible_u8_layout` puts exactly the right bits in every thread;
a ``Reinterpret`` then recovers the low-precision tile with no data movement.
"""

from __future__ import annotations

import math

import numpy as np

from .dtypes import as_dtype, u8
from .layout import Layout, column_spatial, local, spatial
from .packing import PackedBuffer, pack_codes, unpack_codes

__all__ = ["WeightLayoutError", "compatible_u8_layout", "weight_tile_layout", "transform_weights",
           "untransform_weights"]

# (threads along k, threads along n) tried from widest to narrowest
_THREAD_GRIDS = ((4, 8), (2, 8), (1, 8), (1, 4), (1, 2), (1, 1))


class WeightLayoutError(ValueError):
    pass


def compatible_u8_layout(n: int, threads: int) -> Layout:
    """``local(n2).spatial(T).local(n1)`` with ``n1 = gcd(n, 16)`` bytes per vector."""
    if n < 1 or threads < 1:
        raise WeightLayoutError("bytes per thread and thread count must be positive")
    n1 = math.gcd(n, 16)
    return local(n // n1) * spatial(threads) * local(n1)


def weight_tile_layout(bk: int, bn: int, bits: int) -> Layout:
    """Register layout for a ``[bk, bn]`` weight tile of ``bits``-wide elements.

    Shaped like the mma B-operand fragment, ``local(..).column_spatial(tk, tn).local(2, 1)``,
    using the largest thread grid for which each thread owns a whole number of bytes.
    """
    for tk, tn in _THREAD_GRIDS:
        if bk % (2 * tk) or bn % tn:
            continue
        per_thread = (bk // (2 * tk)) * (bn // tn) * 2
        if per_thread * bits % 8 == 0:
            return local(bk // (2 * tk), bn // tn) * column_spatial(tk, tn) * local(2, 1)
    if bk * bn * bits % 8 == 0:
        return local(bk, bn)
    raise WeightLayoutError(f"a {bk}x{bn} tile of {bits}-bit elements is not a whole number of bytes")


def _check_tiles(shape, bk, bn, bits):
    if len(shape) != 2:
        raise WeightLayoutError(f"weights must be 2-D, got shape {list(shape)}")
    K, N = shape
    if bk < 1 or bn < 1 or K % bk or N % bn:
        raise WeightLayoutError(f"tile {bk}x{bn} does not divide weight shape {K}x{N}")
    if bk * bn * bits % 8:
        raise WeightLayoutError(f"{bk}*{bn}*{bits} bits is not a whole number of bytes")


def _tile_maps(bk, bn, layout: Layout, bits: int):
    if layout.shape != (bk, bn):
        raise WeightLayoutError(f"layout shape {list(layout.shape)} != tile shape {[bk, bn]}")
    per_thread = layout.num_locals * bits
    if per_thread % 8:
        raise WeightLayoutError(f"{per_thread} bits per thread is not a whole number of bytes")
    ulay = compatible_u8_layout(per_thread // 8, layout.num_threads)
    tab = layout.table()
    utab = ulay.table()[..., 0]
    return tab, utab, per_thread // 8


def transform_weights(w: PackedBuffer, bk: int, bn: int, layout: Layout | None = None) -> PackedBuffer:
    """Re-tile ``w: dtype[K, N]`` into ``u8[K/bk, N/bn, bk*bn*bits/8]``.

    Thread ``t`` of the tile's register layout owns the elements at
    ``layout(t, 0), layout(t, 1), ...``; their codes, packed back to back, form
    that thread's bytes, which are then placed where ``compatible_u8_layout``
    says thread ``t`` reads them.
    """
    bits = w.dtype.bits
    _check_tiles(w.shape, bk, bn, bits)
    layout = layout or weight_tile_layout(bk, bn, bits)
    tab, utab, nbytes = _tile_maps(bk, bn, layout, bits)
    K, N = w.shape
    kb, nb = K // bk, N // bn
    codes = w.codes().reshape(kb, bk, nb, bn).transpose(0, 2, 1, 3)
    per_thread = codes[:, :, tab[..., 0], tab[..., 1]]  # [kb, nb, T, L]
    T = layout.num_threads
    flat = per_thread.reshape(kb * nb * T, layout.num_locals)
    thread_bytes = np.frombuffer(
        bytes(b"".join(bytes(pack_codes(row, bits)) for row in flat)), dtype=np.uint8
    ).reshape(kb, nb, T, nbytes)
    out = np.zeros((kb, nb, bk * bn * bits // 8), dtype=np.uint8)
    out[:, :, utab] = thread_bytes
    return PackedBuffer(u8, (kb, nb, out.shape[-1]), bytearray(out.tobytes()))


def untransform_weights(t: PackedBuffer, dtype, shape, bk: int, bn: int,
                        layout: Layout | None = None) -> PackedBuffer:
    """Inverse of :func:`transform_weights`."""
    dtype = as_dtype(dtype)
    bits = dtype.bits
    _check_tiles(shape, bk, bn, bits)
    layout = layout or weight_tile_layout(bk, bn, bits)
    tab, utab, nbytes = _tile_maps(bk, bn, layout, bits)
    K, N = shape
    kb, nb = K // bk, N // bn
    raw = np.frombuffer(bytes(t.data), dtype=np.uint8).reshape(kb, nb, -1)
    thread_bytes = raw[:, :, utab].reshape(kb * nb * layout.num_threads, nbytes)
    L = layout.num_locals
    codes = np.stack([unpack_codes(row.tobytes(), bits, L) for row in thread_bytes])
    codes = codes.reshape(kb, nb, layout.num_threads, L)
    tiles = np.zeros((kb, nb, bk, bn), dtype=np.uint64)
    tiles[:, :, tab[..., 0], tab[..., 1]] = codes
    full = tiles.transpose(0, 2, 1, 3).reshape(K, N)
    return PackedBuffer.from_codes(dtype, full)
