import numpy as np
import pytest

from tilevm.demo import (a_tile_layout, build_matmul_program, c_tile_layout, mma_cast_dtype, random_weights,
                         run_matmul, verify)
from tilevm.dtypes import as_dtype
from tilevm.layout import column_local, local, spatial
from tilevm.oracle import dequantize_naive, oracle_matmul
from tilevm.packing import PackedBuffer, dequantize
from tilevm.validate import validate


def test_zero_weights_give_zero():
    a = np.random.default_rng(0).standard_normal((4, 8)).astype(np.float16)
    out = oracle_matmul(a, PackedBuffer.from_values("i4", np.zeros((8, 3))))
    assert out.dtype == np.float16 and not out.any()


def test_scalar_product():
    w = PackedBuffer.from_values("f6e3m2", [[1.5, -0.25, 28.0]])
    out = oracle_matmul(np.array([[3.0]]), w)
    assert out.tolist() == [[4.5, -0.75, 84.0]]


def test_naive_dequant_agrees_with_vectorized():
    rng = np.random.default_rng(1)
    for dt in ("u3", "i7", "f5e2m2"):
        w = random_weights(dt, 32, 8, rng)
        s = rng.uniform(0.5, 2, (4, 8)).astype(np.float32)
        a = dequantize_naive(w, s, 8)
        # flat grouping runs along k once the weights are stored column-major
        wt = PackedBuffer.from_codes(w.dtype, w.codes().T.copy())
        b = dequantize(wt, s.T, 8).reshape(8, 32).T
        assert a.view(np.uint32).tolist() == b.view(np.uint32).tolist()


def test_oracle_shape_errors():
    with pytest.raises(ValueError):
        oracle_matmul(np.zeros((2, 3)), PackedBuffer("u4", (4, 2)))
    with pytest.raises(ValueError):
        dequantize_naive(PackedBuffer("u4", (4, 2)), np.ones((3, 2)), 2)


def test_tile_layouts():
    assert a_tile_layout(16, 16) == column_local(2, 2) * spatial(8, 4) * local(1, 2)
    assert c_tile_layout(32, 16).shape == (32, 16)
    with pytest.raises(ValueError):
        a_tile_layout(8, 16)


def test_cast_target():
    assert mma_cast_dtype(as_dtype("i8")) == as_dtype("f16")
    assert mma_cast_dtype(as_dtype("f8e4m3")) == as_dtype("f16")
    assert mma_cast_dtype(as_dtype("f16")) == as_dtype("f16")
    assert mma_cast_dtype(as_dtype("i16")) == as_dtype("f32")


def test_identity_activations_recover_weights():
    rng = np.random.default_rng(2)
    w = random_weights("i5", 16, 16, rng)
    out, res = run_matmul(np.eye(16, dtype=np.float16), w)
    assert np.array_equal(out, w.values().astype(np.float16))
    assert res.grid == (1, 2)


@pytest.mark.parametrize("dtype", ["u4", "i6", "f6e3m2", "u1", "f3e1m1"])
def test_demo_programs_validate(dtype):
    for kw in ({}, {"group_size": 32}, {"use_shared": True}):
        prog = build_matmul_program(dtype, 32, 16, 32, **kw)
        assert validate(prog, {"M": 64, "N": 32, "K": 64}) == []


def test_verify_examples():
    r = verify("u4", 16, 64, 128)
    assert r.passed and r.max_abs_diff == 0
    assert r.summary() == "PASS u4 M=16 N=64 K=128 max_abs_diff=0"
    assert verify("f6e3m2", 16, 32, 64).passed


@pytest.mark.parametrize("kw", [dict(bm=32, bn=16, bk=32), dict(group_size=32), dict(use_shared=True),
                                dict(group_size=64, bm=32, bk=32, use_shared=True)])
def test_verify_variants(kw):
    assert verify("u3", 32, 32, 128, seed=4, **kw).passed


def test_group_size_must_cover_tiles():
    with pytest.raises(ValueError):
        build_matmul_program("u4", bk=32, group_size=16)
