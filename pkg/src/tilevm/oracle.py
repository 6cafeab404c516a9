"""Plain reference matmul for checking kernel runs.

Deliberately simple: decode every weight with the scalar codec, scale it,
and accumulate in float32 in ascending ``k``. Nothing here goes through the
interpreter or its register tensors.
"""

from __future__ import annotations

import numpy as np

from .dtypes import decode
from .packing import PackedBuffer, load_element

__all__ = ["dequantize_naive", "oracle_matmul"]


def dequantize_naive(w: PackedBuffer, scales=None, group_size: int | None = None) -> np.ndarray:
    """``f32(decode(w[k, n]) * scales[k // group_size, n])`` element by element."""
    K, N = w.shape
    if scales is None:
        scales = np.ones((1, N), dtype=np.float32)
        group_size = K
    scales = np.asarray(scales, dtype=np.float32)
    group_size = group_size or K
    if K % group_size or scales.shape != (K // group_size, N):
        raise ValueError(f"scales {list(scales.shape)} do not match weights {K}x{N} "
                         f"with group size {group_size}")
    out = np.empty((K, N), dtype=np.float32)
    for k in range(K):
        for n in range(N):
            v = np.float32(decode(w.dtype, load_element(w, k * N + n)))
            out[k, n] = v * scales[k // group_size, n]
    return out


def oracle_matmul(a, w: PackedBuffer, scales=None, group_size: int | None = None) -> np.ndarray:
    """``f16(sum_k f32(a[m, k]) * deq(w)[k, n])`` with ascending-k f32 accumulation."""
    a = np.asarray(a, dtype=np.float16)
    M, K = a.shape
    if w.shape[0] != K:
        raise ValueError(f"a is {M}x{K} but w is {w.shape[0]}x{w.shape[1]}")
    b = dequantize_naive(w, scales, group_size)
    af = a.astype(np.float32)
    acc = np.zeros((M, w.shape[1]), dtype=np.float32)
    for k in range(K):
        acc = acc + np.outer(af[:, k], b[k]).astype(np.float32)
    return acc.astype(np.float16)
