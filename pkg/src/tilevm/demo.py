"""The built-in low-precision matmul kernel and a harness to check it.

``C[M, N] = A[M, K] @ dequant(W[K, N])`` with ``A`` in f16 and ``W`` in any
1-8 bit type. Each block computes one ``BM x BN`` tile of ``C``; weight tiles
are read as plain bytes, reinterpreted in registers and cast for the mma.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dtypes import ScalarType, as_dtype, f16
from .interpreter import RunResult, run
from .ir import For, Instr, Param, Program, parse_expr
from .layout import Layout, column_local, local, spatial
from .oracle import oracle_matmul
from .packing import PackedBuffer
from .weights import compatible_u8_layout, transform_weights, weight_tile_layout

__all__ = ["MMA_A_LAYOUT", "MMA_C_LAYOUT", "a_tile_layout", "c_tile_layout", "build_matmul_program",
           "matmul_buffers", "run_matmul", "random_weights", "verify", "VerifyResult", "mma_cast_dtype",
           "weight_pipeline_program"]

MMA_A_LAYOUT = column_local(2, 2) * spatial(8, 4) * local(1, 2)   # 16x16
MMA_C_LAYOUT = local(2, 1) * spatial(8, 4) * local(1, 2)          # 16x8


def a_tile_layout(bm: int, bk: int) -> Layout:
    if bm % 16 or bk % 16:
        raise ValueError(f"A tile {bm}x{bk} must be a multiple of 16x16")
    return local(bm // 16, bk // 16) * MMA_A_LAYOUT


def c_tile_layout(bm: int, bn: int) -> Layout:
    if bm % 16 or bn % 8:
        raise ValueError(f"C tile {bm}x{bn} must be a multiple of 16x8")
    return local(bm // 16, bn // 8) * MMA_C_LAYOUT


def mma_cast_dtype(dtype: ScalarType) -> ScalarType:
    """f16 when every value of ``dtype`` is exact in f16, else f32."""
    if dtype.is_integer:
        return f16 if dtype.bits <= 11 else as_dtype("f32")
    return f16 if dtype.exponent_bits <= 5 and dtype.mantissa_bits <= 10 else as_dtype("f32")


def build_matmul_program(dtype, bm: int = 16, bn: int = 8, bk: int = 16, *,
                         group_size: Optional[int] = None, use_shared: bool = False,
                         name: Optional[str] = None) -> Program:
    """Kernel for ``A: f16[M, K]``, transformed weights ``B`` and output ``C: f16[M, N]``.

    With ``group_size`` the program takes a fourth pointer ``S`` to f32 scales
    of shape ``[K / group_size, N]``; ``group_size`` must be a multiple of ``bk``.
    """
    dtype = as_dtype(dtype)
    e = parse_expr
    wlay = weight_tile_layout(bk, bn, dtype.bits)
    tile_bytes = bk * bn * dtype.bits // 8
    ulay = compatible_u8_layout(wlay.num_locals * dtype.bits // 8, wlay.num_threads)
    scaled = group_size is not None
    if scaled and group_size % bk:
        raise ValueError(f"group size {group_size} must be a multiple of BK={bk}")
    cast_to = as_dtype("f32") if scaled else mma_cast_dtype(dtype)

    params = [Param("A", "ptr"), Param("B", "ptr"), Param("C", "ptr")]
    if scaled:
        params.append(Param("S", "ptr"))
    params += [Param("M", "i32"), Param("N", "i32"), Param("K", "i32")]

    body = [
        Instr("BlockIndices", {}, ("bi", "bj")),
        Instr("GlobalView", {"ptr": e("A"), "dtype": f16, "shape": (e("M"), e("K"))}, "a"),
        Instr("GlobalView", {"ptr": e("B"), "dtype": as_dtype("u8"),
                             "shape": (e(f"K / {bk}"), e(f"N / {bn}"), e(str(tile_bytes)))}, "b"),
        Instr("GlobalView", {"ptr": e("C"), "dtype": f16, "shape": (e("M"), e("N"))}, "c"),
    ]
    if scaled:
        body.append(Instr("GlobalView", {"ptr": e("S"), "dtype": as_dtype("f32"),
                                         "shape": (e(f"K / {group_size}"), e("N"))}, "s"))
    if use_shared:
        body.append(Instr("AllocateShared", {"dtype": f16, "shape": (bm, bk)}, "a_smem"))
    body.append(Instr("AllocateRegister", {"dtype": as_dtype("f32"), "layout": c_tile_layout(bm, bn),
                                           "init": 0.0}, "acc"))
    loop = []
    if use_shared:
        loop += [
            Instr("CopyGlobalToShared", {"src": "a", "dst": "a_smem",
                                         "offsets": (e(f"bi * {bm}"), e(f"k * {bk}"))}),
            Instr("Synchronize"),
            Instr("LoadShared", {"src": "a_smem", "layout": a_tile_layout(bm, bk)}, "a_tile"),
        ]
    else:
        loop.append(Instr("LoadGlobal", {"src": "a", "offsets": (e(f"bi * {bm}"), e(f"k * {bk}")),
                                         "layout": a_tile_layout(bm, bk)}, "a_tile"))
    loop += [
        Instr("LoadGlobal", {"src": "b", "offsets": (e("k"), e("bj"), e("0")), "layout": ulay}, "b_bytes"),
        Instr("Reinterpret", {"src": "b_bytes", "dtype": dtype, "layout": wlay}, "b_low"),
        Instr("Cast", {"src": "b_low", "dtype": cast_to}, "b_tile"),
    ]
    b_name = "b_tile"
    if scaled:
        loop += [
            Instr("LoadGlobal", {"src": "s", "offsets": (e(f"k * {bk} / {group_size}"), e(f"bj * {bn}")),
                                 "layout": local(1, bn)}, "s_row"),
            Instr("Elementwise", {"fn": "mul", "x": "b_tile", "y": "s_row"}, "b_scaled"),
        ]
        b_name = "b_scaled"
    loop.append(Instr("Mma", {"a": "a_tile", "b": b_name, "c": "acc"}, out="acc"))
    if use_shared:
        loop.append(Instr("Synchronize"))
    body.append(For("k", e("0"), e(f"K / {bk}"), e("1"), tuple(loop)))
    body += [
        Instr("Cast", {"src": "acc", "dtype": f16}, "c_tile"),
        Instr("StoreGlobal", {"src": "c_tile", "dst": "c", "offsets": (e(f"bi * {bm}"), e(f"bj * {bn}"))}),
    ]
    name = name or f"matmul_f16_{dtype.name}_{bm}x{bn}x{bk}" + ("_scaled" if scaled else "")
    return Program(name, (e(f"M / {bm}"), e(f"N / {bn}")), tuple(params), tuple(body))


def weight_pipeline_program(dtype, bk: int, bn: int, to="f16") -> Program:
    """Load every transformed weight tile as bytes, reinterpret, cast and store it to ``Y``.

    Params ``B`` (transformed u8 weights), ``Y`` (``to[K, N]``), ``K``, ``N``; one block per tile.
    """
    dtype, to = as_dtype(dtype), as_dtype(to)
    e = parse_expr
    wlay = weight_tile_layout(bk, bn, dtype.bits)
    tile_bytes = bk * bn * dtype.bits // 8
    ulay = compatible_u8_layout(wlay.num_locals * dtype.bits // 8, wlay.num_threads)
    body = (
        Instr("BlockIndices", {}, ("bk", "bn")),
        Instr("GlobalView", {"ptr": e("B"), "dtype": as_dtype("u8"),
                             "shape": (e(f"K / {bk}"), e(f"N / {bn}"), e(str(tile_bytes)))}, "b"),
        Instr("GlobalView", {"ptr": e("Y"), "dtype": to, "shape": (e("K"), e("N"))}, "y"),
        Instr("LoadGlobal", {"src": "b", "offsets": (e("bk"), e("bn"), e("0")), "layout": ulay}, "raw"),
        Instr("Reinterpret", {"src": "raw", "dtype": dtype, "layout": wlay}, "low"),
        Instr("Cast", {"src": "low", "dtype": to}, "wide"),
        Instr("StoreGlobal", {"src": "wide", "dst": "y", "offsets": (e(f"bk * {bk}"), e(f"bn * {bn}"))}),
    )
    params = (Param("B", "ptr"), Param("Y", "ptr"), Param("K", "i32"), Param("N", "i32"))
    return Program(f"weights_{dtype.name}_{bk}x{bn}", (e(f"K / {bk}"), e(f"N / {bn}")), params, body)


def random_weights(dtype, K: int, N: int, rng: np.random.Generator) -> PackedBuffer:
    """Uniformly random codes over the whole code space of ``dtype``."""
    dtype = as_dtype(dtype)
    codes = rng.integers(0, 1 << dtype.bits, size=(K, N), dtype=np.uint64)
    return PackedBuffer.from_codes(dtype, codes)


def matmul_buffers(a, w: PackedBuffer, bk: int, bn: int, scales=None) -> dict:
    M = np.asarray(a).shape[0]
    out = {"A": PackedBuffer.from_values(f16, np.asarray(a, dtype=np.float16)),
           "B": transform_weights(w, bk, bn),
           "C": PackedBuffer(f16, (M, w.shape[1]))}
    if scales is not None:
        out["S"] = PackedBuffer.from_values("f32", np.asarray(scales, dtype=np.float32))
    return out


def run_matmul(a, w: PackedBuffer, bm: int = 16, bn: int = 8, bk: int = 16, *, scales=None,
               group_size: Optional[int] = None, use_shared: bool = False, **run_options):
    """Run the built-in kernel; returns ``(C as float16 array, RunResult)``."""
    a = np.asarray(a, dtype=np.float16)
    M, K = a.shape
    N = w.shape[1]
    if scales is not None and group_size is None:
        group_size = K // np.asarray(scales).shape[0]
    prog = build_matmul_program(w.dtype, bm, bn, bk, group_size=group_size if scales is not None else None,
                                use_shared=use_shared)
    bufs = matmul_buffers(a, w, bk, bn, scales)
    res: RunResult = run(prog, {"M": M, "N": N, "K": K}, bufs, **run_options)
    return res.buffers["C"].to_numpy().reshape(M, N), res


@dataclass
class VerifyResult:
    dtype: str
    shape: tuple
    passed: bool
    max_abs_diff: float
    output: np.ndarray
    expected: np.ndarray

    def summary(self) -> str:
        M, N, K = self.shape
        return (f"{'PASS' if self.passed else 'FAIL'} {self.dtype} M={M} N={N} K={K} "
                f"max_abs_diff={self.max_abs_diff:g}")


def verify(dtype, M: int, N: int, K: int, bm: int = 16, bn: int = 8, bk: int = 16, *, seed: int = 0,
           group_size: Optional[int] = None, use_shared: bool = False, **run_options) -> VerifyResult:
    """Random instance through the kernel and the oracle; passes iff bit-identical.

    Without ``group_size`` all scales are 1.0 and the kernel skips scaling.
    """
    dtype = as_dtype(dtype)
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((M, K)).astype(np.float16)
    w = random_weights(dtype, K, N, rng)
    scales = None
    if group_size is not None:
        scales = rng.uniform(0.5, 2.0, size=(K // group_size, N)).astype(np.float32)
    out, _ = run_matmul(a, w, bm, bn, bk, scales=scales, group_size=group_size, use_shared=use_shared,
                        **run_options)
    ref = oracle_matmul(a, w, scales, group_size)
    same = out.view(np.uint16) == ref.view(np.uint16)
    diff = np.abs(out.astype(np.float64) - ref.astype(np.float64))
    diff = np.where(same, 0.0, diff)
    max_diff = float(np.nan_to_num(diff, nan=np.inf).max()) if diff.size else 0.0
    return VerifyResult(dtype.name, (M, N, K), bool(same.all()), max_diff, out, ref)
