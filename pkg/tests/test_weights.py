import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tilevm.demo import random_weights, weight_pipeline_program
from tilevm.dtypes import as_dtype, decode_array
from tilevm.interpreter import RegisterTensor, reinterpret, run
from tilevm.layout import local, spatial
from tilevm.packing import PackedBuffer, load_element
from tilevm.weights import (WeightLayoutError, compatible_u8_layout, transform_weights, untransform_weights,
                            weight_tile_layout)

DTYPES = ["u1", "u2", "u3", "u4", "u5", "u6", "u7", "u8", "i2", "i3", "i4", "i5", "i6", "i7", "i8",
          "f8e4m3", "f7e3m3", "f6e3m2", "f5e2m2", "f4e2m1", "f3e1m1"]


def pipeline(w, bk, bn):
    K, N = w.shape
    res = run(weight_pipeline_program(w.dtype, bk, bn), {"K": K, "N": N},
              {"B": transform_weights(w, bk, bn), "Y": PackedBuffer("f16", (K, N))})
    return res


def direct_decode(w):
    """Element-wise decode through the scalar packed accessor."""
    K, N = w.shape
    codes = np.array([load_element(w, k) for k in range(K * N)], dtype=np.uint64)
    return decode_array(w.dtype, codes).reshape(K, N).astype(np.float16)


def test_compatible_u8_layout_examples():
    assert compatible_u8_layout(3, 32) == local(3) * spatial(32) * local(1) == local(3) * spatial(32)
    assert compatible_u8_layout(16, 32) == local(1) * spatial(32) * local(16)
    assert compatible_u8_layout(8, 32) == spatial(32) * local(8)
    assert compatible_u8_layout(24, 32) == local(3) * spatial(32) * local(8)
    lay = compatible_u8_layout(12, 4)
    assert lay.num_threads == 4 and lay.num_locals == 12


def test_i6_tile_is_24_bytes():
    w = PackedBuffer.from_values("i6", np.arange(-16, 16).reshape(4, 8))
    t = transform_weights(w, 4, 8)
    assert t.dtype == as_dtype("u8") and t.shape == (1, 1, 24) and t.nbytes == 24


def test_single_tile_round_trip():
    rng = np.random.default_rng(5)
    w = random_weights("i6", 16, 8, rng)
    res = pipeline(w, 16, 8)
    assert np.array_equal(res.buffers["Y"].to_numpy(), direct_decode(w))


def test_i6_u8_pair_via_transform():
    # 16x8 i6 under the mma B fragment: 32 threads x 4 elements = 3 bytes each
    lay = weight_tile_layout(16, 8, 6)
    assert str(lay) == "local(2, 1).column_spatial(4, 8).local(2, 1)"
    w = random_weights("i6", 16, 8, np.random.default_rng(0))
    raw = np.frombuffer(bytes(transform_weights(w, 16, 8).data), dtype=np.uint8)
    ulay = compatible_u8_layout(3, 32)
    u8reg = RegisterTensor.from_logical("u8", ulay, raw)
    low = reinterpret(u8reg, "i6", lay)
    assert np.array_equal(low.logical_codes(), w.codes())


def test_random_u3_every_tile():
    rng = np.random.default_rng(11)
    w = random_weights("u3", 32, 64, rng)
    t = transform_weights(w, 8, 16)
    assert t.shape == (4, 4, 48)
    lay = weight_tile_layout(8, 16, 3)
    ulay = compatible_u8_layout(lay.num_locals * 3 // 8, lay.num_threads)
    raw = np.frombuffer(bytes(t.data), dtype=np.uint8).reshape(4, 4, 48)
    for kb in range(4):
        for nb in range(4):
            reg = reinterpret(RegisterTensor.from_logical("u8", ulay, raw[kb, nb]), "u3", lay)
            want = [[load_element(w, (kb * 8 + r) * 64 + nb * 16 + c) for c in range(16)] for r in range(8)]
            assert reg.logical_codes().tolist() == want
    assert np.array_equal(pipeline(w, 8, 16).buffers["Y"].to_numpy(), direct_decode(w))


@settings(max_examples=40)
@given(st.sampled_from(DTYPES), st.sampled_from([8, 16, 32]), st.sampled_from([8, 16, 32]),
       st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 31))
def test_transform_untransform_inverse(dtype, bk, bn, kt, nt, seed):
    w = random_weights(dtype, bk * kt, bn * nt, np.random.default_rng(seed))
    t = transform_weights(w, bk, bn)
    assert t.nbytes == w.nbytes
    assert untransform_weights(t, dtype, w.shape, bk, bn) == w


def test_transform_preserves_bit_population():
    w = random_weights("u5", 16, 16, np.random.default_rng(2))
    t = transform_weights(w, 16, 16)
    count = lambda b: sum(bin(x).count("1") for x in bytes(b.data))
    assert count(t) == count(w)


def test_transform_divisibility_errors():
    w = PackedBuffer("u4", (16, 12))
    with pytest.raises(WeightLayoutError):
        transform_weights(w, 16, 8)
    with pytest.raises(WeightLayoutError):
        transform_weights(PackedBuffer("u3", (1, 1)), 1, 1)
    with pytest.raises(WeightLayoutError):
        transform_weights(PackedBuffer("u4", (4,)), 4, 1)
    with pytest.raises(WeightLayoutError):
        weight_tile_layout(3, 1, 3)
    with pytest.raises(WeightLayoutError):
        compatible_u8_layout(0, 32)


def test_layout_chooser_whole_bytes_per_thread():
    for bits in range(1, 9):
        for bk in (8, 16, 32):
            for bn in (8, 16, 32):
                lay = weight_tile_layout(bk, bn, bits)
                assert lay.shape == (bk, bn)
                assert lay.num_locals * bits % 8 == 0
