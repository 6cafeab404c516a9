import numpy as np
import pytest
from hypothesis import given, strategies as st

from tilevm import tensorfile
from tilevm.dtypes import all_lowprec_types, parse_dtype, sint, uint
from tilevm.packing import (PackedBuffer, PackingError, cast_buffer, dequantize, gather_codes, load_element,
                            pack_codes, packed_nbytes, quantize, scatter_codes, store_element, unpack_codes)

LOWPREC = all_lowprec_types()


def ref_bits(codes, bits):
    """Bit stream as a Python int, element k at bit k*bits."""
    out = 0
    for k, c in enumerate(codes):
        out |= int(c) << (k * bits)
    return out


def test_store_example_spans_bytes():
    buf = PackedBuffer(uint(3), (4,))
    for k, v in enumerate([5, 3, 6, 1]):
        store_element(buf, k, v)
    # 101 011 110 001 read LSB-first: 0b001_110_011_101
    assert int.from_bytes(buf.data, "little") == 0b001110011101
    assert [load_element(buf, k) for k in range(4)] == [5, 3, 6, 1]
    assert buf.nbytes == 2


def test_store_leaves_neighbours_alone():
    buf = PackedBuffer(sint(6), (4,), bytearray(b"\xff\xff\xff"))
    store_element(buf, 1, 0)
    assert [load_element(buf, k) for k in range(4)] == [63, 0, 63, 63]


def test_length_formula():
    for bits in range(1, 9):
        for count in (0, 1, 7, 8, 9, 100):
            assert PackedBuffer(uint(bits), (count,)).nbytes == -(-count * bits // 8)
    assert packed_nbytes(32, 6) == 24


def test_store_rejects_wide_values_and_bad_index():
    buf = PackedBuffer(uint(4), (2,))
    with pytest.raises(PackingError):
        store_element(buf, 0, 16)
    with pytest.raises(PackingError):
        load_element(buf, 2)
    with pytest.raises(PackingError):
        PackedBuffer(uint(4), (3,), bytearray(1))


@given(st.sampled_from(LOWPREC), st.data())
def test_scalar_round_trip_random(t, data):
    n = data.draw(st.integers(1, 40))
    codes = data.draw(st.lists(st.integers(0, (1 << t.bits) - 1), min_size=n, max_size=n))
    buf = PackedBuffer(t, (n,))
    for k, c in enumerate(codes):
        store_element(buf, k, c)
    assert int.from_bytes(buf.data, "little") == ref_bits(codes, t.bits)
    assert [load_element(buf, k) for k in range(n)] == codes
    assert buf.codes().tolist() == codes


@given(st.sampled_from(LOWPREC), st.data())
def test_vectorized_matches_scalar(t, data):
    n = data.draw(st.integers(1, 64))
    codes = np.array(data.draw(st.lists(st.integers(0, (1 << t.bits) - 1), min_size=n, max_size=n)),
                     dtype=np.uint64)
    packed = pack_codes(codes, t.bits)
    assert int.from_bytes(packed, "little") == ref_bits(codes, t.bits)
    assert np.array_equal(unpack_codes(packed, t.bits, n), codes)
    pos = np.arange(n) * t.bits
    assert np.array_equal(gather_codes(packed, pos, t.bits), codes)
    fresh = np.zeros(len(packed), dtype=np.uint8)
    scatter_codes(fresh, pos[::-1], codes[::-1], t.bits)
    assert fresh.tobytes() == bytes(packed)


def test_gather_at_arbitrary_bit_offsets():
    rng = np.random.default_rng(1)
    data = rng.integers(0, 256, 64, dtype=np.uint8)
    stream = int.from_bytes(data.tobytes(), "little")
    for bits in (1, 3, 5, 7, 8, 13, 16, 32):
        offs = rng.integers(0, 64 * 8 - bits, 50)
        got = gather_codes(data, offs, bits)
        want = [(stream >> int(o)) & ((1 << bits) - 1) for o in offs]
        assert got.tolist() == want


def test_values_round_trip_representable():
    t = parse_dtype("f6e3m2")
    vals = np.array([0.0, 0.0625, 1.0, -1.5, 28.0, -0.25])
    assert np.array_equal(PackedBuffer.from_values(t, vals).values(), vals)


def test_cast_buffer():
    i6 = sint(6)
    src = PackedBuffer.from_values(i6, np.arange(-32, 32))
    f = cast_buffer(src, "f16")
    assert np.array_equal(f.to_numpy(), np.arange(-32, 32, dtype=np.float16))
    assert cast_buffer(src, i6) == src
    bits = cast_buffer(PackedBuffer.from_values(uint(1), [0, 1, 1]), "f16")
    assert bits.to_numpy().tolist() == [0.0, 1.0, 1.0]


def test_dequantize_flat_groups():
    w = PackedBuffer.from_values(sint(4), [1, -2, 3, 4, -8, 7])
    out = dequantize(w, [0.5, 2.0], 3)
    assert out.dtype == np.float32
    assert out.tolist() == [0.5, -1.0, 1.5, 8.0, -16.0, 14.0]
    with pytest.raises(PackingError):
        dequantize(w, [1.0], 4)


def test_quantize_per_group():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((32, 8)).astype(np.float32)
    q, s = quantize(x, "i8", group_size=16)
    assert q.shape == (32, 8) and s.shape == (2, 8)
    err = np.abs(q.values() * np.repeat(s, 16, axis=0) - x)
    assert err.max() <= s.max() * 0.5 + 1e-6
    q1, s1 = quantize(np.array([[1.0, -3.0]]), "i4")
    assert np.all(s1 == 1.0) and q1.values().tolist() == [[1, -3]]


@pytest.mark.parametrize("t", [uint(1), sint(6), parse_dtype("f6e3m2"), parse_dtype("f16")], ids=str)
def test_tensorfile_round_trip(t, tmp_path):
    rng = np.random.default_rng(3)
    buf = PackedBuffer.from_codes(t, rng.integers(0, 1 << t.bits, (5, 7), dtype=np.uint64))
    path = tmp_path / "x.tlus"
    tensorfile.save(path, buf)
    back, meta = tensorfile.load(path)
    assert back == buf and meta == {}
    blob = tensorfile.dumps(buf, {"bk": 4})
    back, meta = tensorfile.loads(blob)
    assert back == buf and meta == {"bk": 4}


def test_tensorfile_header_layout():
    buf = PackedBuffer.from_codes(sint(6), np.zeros((4, 8), dtype=np.uint64))
    blob = tensorfile.dumps(buf)
    assert blob[:4] == b"TLUS"
    assert blob[4:6] == (1).to_bytes(2, "little")
    assert list(blob[6:11]) == [1, 6, 0, 0, 2]
    assert blob[11:27] == (4).to_bytes(8, "little") + (8).to_bytes(8, "little")
    assert len(blob) == 27 + 24


def test_tensorfile_errors():
    with pytest.raises(tensorfile.TensorFileError):
        tensorfile.loads(b"NOPE")
    blob = tensorfile.dumps(PackedBuffer(uint(4), (4,)))
    with pytest.raises(tensorfile.TensorFileError):
        tensorfile.loads(blob[:-1])
    with pytest.raises(tensorfile.TensorFileError):
        tensorfile.loads(blob[:8])
