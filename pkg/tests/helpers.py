"""Strategies and independent reference implementations shared by the tests."""

import itertools
import math

import numpy as np
from hypothesis import strategies as st

from tilevm.layout import column_local, column_spatial, local, spatial

PRIMITIVES = {"local": local, "spatial": spatial, "column_local": column_local,
              "column_spatial": column_spatial}
SMALL = st.sampled_from([1, 2, 3, 4])


@st.composite
def primitive(draw, rank, max_size=16):
    kind = draw(st.sampled_from(sorted(PRIMITIVES)))
    while True:
        dims = draw(st.lists(SMALL, min_size=rank, max_size=rank))
        if math.prod(dims) <= max_size:
            return PRIMITIVES[kind](*dims)


@st.composite
def product(draw, rank, parts=(1, 3), max_size=64):
    n = draw(st.integers(*parts))
    out = draw(primitive(rank))
    for _ in range(n - 1):
        nxt = draw(primitive(rank))
        if out.size * nxt.size > max_size:
            break
        out = out * nxt
    return out


def primitive_table(kind, dims):
    """(T, N, rank) table of a primitive straight from its definition."""
    rank = len(dims)
    cells = list(itertools.product(*[range(d) for d in dims]))
    if kind in ("column_local", "column_spatial"):
        # column-major: dimension 0 varies fastest
        cells = sorted(cells, key=lambda c: tuple(reversed(c)))
    arr = np.array(cells, dtype=np.int64).reshape(-1, rank)
    if kind.endswith("local"):
        return arr.reshape(1, -1, rank)
    return arr.reshape(-1, 1, rank)


def kron_table(tf, tg, g_shape):
    """Table of f ⊗ g from the tables of f and g: h(t, i) = f(t // Tg, i // Ng) * g.shape + g(t % Tg, i % Ng)."""
    Tf, Nf, r = tf.shape
    Tg, Ng, _ = tg.shape
    t = np.arange(Tf * Tg)[:, None]
    i = np.arange(Nf * Ng)[None, :]
    return tf[t // Tg, i // Ng] * np.asarray(g_shape, dtype=np.int64) + tg[t % Tg, i % Ng]


def is_bijective(table, shape):
    flat = table.reshape(-1, len(shape))
    lin = np.ravel_multi_index(tuple(flat.T), shape)
    return np.array_equal(np.sort(lin), np.arange(math.prod(shape)))
