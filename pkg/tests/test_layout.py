import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import PRIMITIVES, is_bijective, kron_table, primitive, primitive_table, product
from tilevm.layout import (Layout, LayoutError, column_local, column_spatial, compose, divide,
                           divides_for_ldmatrix, evaluate, invert, local, parse_layout, ravel,
                           render_grid, spatial, unravel)

MMA_C = local(2, 1) * spatial(8, 4) * local(1, 2)


def test_ravel_unravel_examples():
    assert unravel(11, [4, 2, 8]) == [0, 1, 3]
    assert ravel([2, 3], [8, 4]) == 11
    assert ravel([], []) == 0


@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.data())
def test_ravel_unravel_inverse(shape, data):
    k = data.draw(st.integers(0, int(np.prod(shape)) - 1))
    assert ravel(unravel(k, shape), shape) == k
    assert unravel(k, shape) == list(np.unravel_index(k, shape))


def test_unravel_out_of_range():
    with pytest.raises(LayoutError):
        unravel(64, [4, 2, 8])


def test_mma_c_layout_formula():
    assert MMA_C.num_threads == 32 and MMA_C.num_locals == 4
    for t in range(32):
        for i in range(4):
            assert MMA_C(t, i) == (t // 4 + i // 2 * 8, t % 4 * 2 + i % 2)
    assert evaluate(MMA_C, 5, 2) == (9, 2)
    assert evaluate(MMA_C, 31, 3) == (15, 7)
    assert invert(MMA_C, (9, 2)) == (5, 2)


@pytest.mark.parametrize("kind", sorted(PRIMITIVES))
@pytest.mark.parametrize("dims", [(6,), (2, 3), (4, 8), (2, 1, 3)])
def test_primitives_match_definition(kind, dims):
    lay = PRIMITIVES[kind](*dims)
    assert lay.shape == dims
    assert np.array_equal(lay.table(), primitive_table(kind, dims))


def test_column_primitives():
    assert column_spatial(4, 8)(5, 0) == (1, 1)
    assert column_local(2, 2)(0, 1) == (1, 0)


@given(st.integers(1, 3).flatmap(lambda r: st.tuples(primitive(r), primitive(r))))
def test_compose_matches_kronecker_oracle(pair):
    f, g = pair
    h = compose(f, g)
    assert h.shape == tuple(a * b for a, b in zip(f.shape, g.shape))
    assert np.array_equal(h.table(), kron_table(f.table(), g.table(), g.shape))


@given(st.integers(1, 3).flatmap(lambda r: product(r)))
def test_bijective_and_invertible(lay):
    assert is_bijective(lay.table(), lay.shape)
    for t in range(lay.num_threads):
        for i in range(lay.num_locals):
            assert invert(lay, lay(t, i)) == (t, i)


@given(st.integers(1, 3).flatmap(lambda r: st.tuples(product(r, max_size=32), product(r, max_size=32))))
def test_divide_undoes_compose(pair):
    f, g = pair
    assert divide(compose(f, g), g) == f


def test_divide_examples():
    assert local(2, 4) / local(1, 2) == local(2, 2)
    assert spatial(2, 2) / local(1, 2) is None
    assert MMA_C / (spatial(8, 4) * local(1, 2)) == local(2, 1)
    assert divide(local(4), local(3)) is None


def test_compose_rank_mismatch():
    with pytest.raises(LayoutError):
        local(2) * local(2, 2)


def test_normalization_gives_semantic_equality():
    assert local(2) * local(3) == local(6)
    assert spatial(1, 2) * spatial(2, 1) == column_spatial(2, 2)
    assert local(3) * spatial(32) * local(1) == local(3) * spatial(32)


@pytest.mark.parametrize("text", [
    "local(2, 1).spatial(8, 4).local(1, 2)",
    "column_local(2, 2).spatial(8, 4).local(1, 2)",
    "local(2, 1).column_spatial(4, 8).local(2, 1)",
    "local(3).spatial(32)",
    "spatial(8, 4).local(1, 4)",
])
def test_text_round_trip(text):
    lay = parse_layout(text)
    assert str(lay) == text
    assert parse_layout(str(lay)) == lay


@given(st.integers(1, 3).flatmap(lambda r: product(r)))
def test_text_and_json_round_trip(lay):
    try:
        text = lay.to_text()
    except LayoutError:
        text = None
    if text is not None:
        assert parse_layout(text) == lay
    assert Layout.from_json(lay.to_json()) == lay
    assert Layout.from_dict(json.loads(json.dumps(lay.to_dict()))) == lay


def test_parse_errors():
    for bad in ["local(2", "tile(2)", "local(0)", "local(2).spatial(2, 2)", ""]:
        with pytest.raises(LayoutError):
            parse_layout(bad)


def test_evaluate_range_errors():
    with pytest.raises(LayoutError):
        MMA_C(32, 0)
    with pytest.raises(LayoutError):
        invert(MMA_C, (16, 0))


def test_four_fields():
    d = (local(3) * spatial(32)).to_dict()
    assert d == {"shape": [96], "mode_shape": [3, 32], "spatial_modes": [1], "local_modes": [0]}


def test_render_grid():
    assert render_grid(spatial(2, 3)).split() == [f"t{t}:0" for t in range(6)]
    assert render_grid(local(2, 2)).splitlines() == ["t0:0 t0:1", "t0:2 t0:3"]


def test_ldmatrix_divisibility():
    assert divides_for_ldmatrix(local(2, 2) * spatial(8, 4) * local(1, 4))
    assert not divides_for_ldmatrix(MMA_C)
