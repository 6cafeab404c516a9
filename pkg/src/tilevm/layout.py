"""Distributed register-tensor layouts.

A layout maps a pair ``(thread, slot)`` to a logical index of a tile. Every
layout is stored in the unified mode representation: each tensor dimension is
split into sub-dimensions (modes), and each mode is assigned to either the
thread index or the per-thread local index. Both indices are row-major over
their modes, in the order given by ``spatial_modes`` and ``local_modes``.

Layouts are built from two primitives, :func:`local` and :func:`spatial`, and
combined with the Kronecker product (:func:`compose`, or the ``*`` operator).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Layout",
    "LayoutError",
    "local",
    "spatial",
    "column_local",
    "column_spatial",
    "compose",
    "divide",
    "evaluate",
    "invert",
    "ravel",
    "unravel",
    "divides_for_ldmatrix",
    "parse_layout",
    "render_grid",
]


class LayoutError(ValueError):
    """Raised for malformed layouts or invalid layout queries."""


def ravel(coords: Sequence[int], grid_shape: Sequence[int]) -> int:
    """Row-major linear index of ``coords`` in a grid of ``grid_shape``."""
    if len(coords) != len(grid_shape):
        raise LayoutError(f"rank mismatch: coords {list(coords)} vs grid {list(grid_shape)}")
    k = 0
    for c, n in zip(coords, grid_shape):
        if not 0 <= c < n:
            raise LayoutError(f"coordinate {list(coords)} out of range for grid {list(grid_shape)}")
        k = k * n + c
    return k


def unravel(k: int, grid_shape: Sequence[int]) -> list[int]:
    """Inverse of :func:`ravel`."""
    total = math.prod(grid_shape)
    if not 0 <= k < total:
        raise LayoutError(f"linear index {k} out of range for grid {list(grid_shape)}")
    coords = []
    for n in reversed(grid_shape):
        coords.append(k % n)
        k //= n
    return coords[::-1]


def _unravel_many(k: np.ndarray, grid_shape: Sequence[int]) -> list[np.ndarray]:
    out = []
    for n in reversed(grid_shape):
        out.append(k % n)
        k = k // n
    return out[::-1]


def _mode_dims(shape: Sequence[int], mode_shape: Sequence[int]) -> tuple[int, ...]:
    """Assign each mode to the dimension it splits.

    Modes fill dimensions in order. An extent-1 mode belongs to the first
    dimension that is still incomplete (or the last one if all are complete).
    """
    acc = [1] * len(shape)
    dims: list[int] = []
    for e in mode_shape:
        cur = next((d for d in range(len(shape)) if acc[d] < shape[d]), None)
        if cur is None:
            if e != 1:
                raise LayoutError(f"mode_shape {list(mode_shape)} has modes beyond shape {list(shape)}")
            cur = len(shape) - 1
        acc[cur] *= e
        if shape[cur] % acc[cur]:
            raise LayoutError(
                f"mode_shape {list(mode_shape)} does not split shape {list(shape)} (dimension {cur})")
        dims.append(cur)
    if acc != list(shape):
        raise LayoutError(f"mode_shape {list(mode_shape)} does not split shape {list(shape)}")
    return tuple(dims)


@dataclass(frozen=True)
class Layout:
    """A bijective distributed layout in unified mode representation.

    Instances produced by this module are always normalized (no extent-1
    modes, no mergeable neighbours), so ``==`` on two layouts coincides with
    equality of their mapping tables.
    """

    shape: tuple[int, ...]
    mode_shape: tuple[int, ...]
    spatial_modes: tuple[int, ...]
    local_modes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "mode_shape", tuple(int(s) for s in self.mode_shape))
        object.__setattr__(self, "spatial_modes", tuple(int(s) for s in self.spatial_modes))
        object.__setattr__(self, "local_modes", tuple(int(s) for s in self.local_modes))
        if not self.shape:
            raise LayoutError("layout must have rank >= 1")
        if any(s < 1 for s in self.shape) or any(s < 1 for s in self.mode_shape):
            raise LayoutError("shape and mode_shape entries must be positive")
        if math.prod(self.mode_shape) != math.prod(self.shape):
            raise LayoutError("product(mode_shape) must equal product(shape)")
        modes = sorted(self.spatial_modes + self.local_modes)
        if modes != list(range(len(self.mode_shape))):
            raise LayoutError(
                "spatial_modes and local_modes must partition the mode indices "
                f"(got spatial={list(self.spatial_modes)}, local={list(self.local_modes)})"
            )
        _mode_dims(self.shape, self.mode_shape)

    # -- derived quantities ---------------------------------------------

    @cached_property
    def mode_dims(self) -> tuple[int, ...]:
        return _mode_dims(self.shape, self.mode_shape)

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def num_threads(self) -> int:
        return math.prod(self.mode_shape[m] for m in self.spatial_modes)

    @property
    def num_locals(self) -> int:
        return math.prod(self.mode_shape[m] for m in self.local_modes)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def dim_modes(self, d: int) -> list[int]:
        return [m for m, dd in enumerate(self.mode_dims) if dd == d]

    # -- evaluation -----------------------------------------------------

    def __call__(self, t: int, i: int) -> tuple[int, ...]:
        return evaluate(self, t, i)

    def table(self) -> np.ndarray:
        """Mapping table of shape ``(num_threads, num_locals, rank)``."""
        return _table(self)

    def __mul__(self, other: "Layout") -> "Layout":
        return compose(self, other)

    def __truediv__(self, other: "Layout") -> Optional["Layout"]:
        return divide(self, other)

    # -- serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "mode_shape": list(self.mode_shape),
            "spatial_modes": list(self.spatial_modes),
            "local_modes": list(self.local_modes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Layout":
        try:
            raw = cls(d["shape"], d["mode_shape"], d["spatial_modes"], d["local_modes"])
        except KeyError as e:
            raise LayoutError(f"layout JSON missing field {e}") from None
        return _normalize(raw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Layout":
        return cls.from_dict(json.loads(text))

    def to_text(self) -> str:
        return _to_text(self)

    def __str__(self) -> str:
        try:
            return self.to_text()
        except LayoutError:
            return self.to_json()


def _normalize(lay: Layout) -> Layout:
    """Drop extent-1 modes and merge neighbours split from one dimension."""
    ext = list(lay.mode_shape)
    dims = list(lay.mode_dims)
    sp = list(lay.spatial_modes)
    lo = list(lay.local_modes)

    def drop(m: int):
        for lst in (sp, lo):
            if m in lst:
                lst.remove(m)
            for j, x in enumerate(lst):
                if x > m:
                    lst[j] = x - 1
        del ext[m]
        del dims[m]

    m = 0
    while m < len(ext):
        if ext[m] == 1:
            drop(m)
        else:
            m += 1

    changed = True
    while changed:
        changed = False
        for m in range(len(ext) - 1):
            if dims[m] != dims[m + 1]:
                continue
            for lst in (sp, lo):
                if m in lst and m + 1 in lst and lst.index(m + 1) == lst.index(m) + 1:
                    ext[m] *= ext[m + 1]
                    lst.remove(m + 1)
                    ext_m = ext[m]
                    drop(m + 1)
                    ext[m] = ext_m
                    changed = True
                    break
            if changed:
                break
    return Layout(lay.shape, tuple(ext), tuple(sp), tuple(lo))


def _from_modes(shape, modes, spatial_order, local_order) -> Layout:
    """Build from per-dimension mode lists; ``modes[d]`` is a list of (extent, key)."""
    mode_shape = []
    index = {}
    for d in range(len(shape)):
        for extent, key in modes[d]:
            index[key] = len(mode_shape)
            mode_shape.append(extent)
    raw = Layout(tuple(shape), tuple(mode_shape),
                 tuple(index[k] for k in spatial_order), tuple(index[k] for k in local_order))
    return _normalize(raw)


def _check_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(dims)
    if not dims:
        raise LayoutError("primitive layout needs at least one dimension")
    for n in dims:
        if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or n < 1:
            raise LayoutError(f"primitive layout dimensions must be positive integers, got {list(dims)}")
    return tuple(int(n) for n in dims)


def local(*dims: int) -> Layout:
    """One thread holding every element, slots in row-major order."""
    dims = _check_dims(dims[0] if len(dims) == 1 and isinstance(dims[0], (tuple, list)) else dims)
    modes = [[(n, d)] for d, n in enumerate(dims)]
    return _from_modes(dims, modes, [], list(range(len(dims))))


def spatial(*dims: int) -> Layout:
    """One element per thread, threads in row-major order."""
    dims = _check_dims(dims[0] if len(dims) == 1 and isinstance(dims[0], (tuple, list)) else dims)
    modes = [[(n, d)] for d, n in enumerate(dims)]
    return _from_modes(dims, modes, list(range(len(dims))), [])


def _axis_factor(prim, rank: int, d: int, n: int) -> Layout:
    dims = [1] * rank
    dims[d] = n
    return prim(*dims)


def column_spatial(*dims: int) -> Layout:
    """Like :func:`spatial` but threads are numbered column-major."""
    dims = _check_dims(dims[0] if len(dims) == 1 and isinstance(dims[0], (tuple, list)) else dims)
    out = None
    for d in reversed(range(len(dims))):
        f = _axis_factor(spatial, len(dims), d, dims[d])
        out = f if out is None else compose(out, f)
    return out


def column_local(*dims: int) -> Layout:
    """Like :func:`local` but slots are numbered column-major."""
    dims = _check_dims(dims[0] if len(dims) == 1 and isinstance(dims[0], (tuple, list)) else dims)
    out = None
    for d in reversed(range(len(dims))):
        f = _axis_factor(local, len(dims), d, dims[d])
        out = f if out is None else compose(out, f)
    return out


def compose(f: Layout, g: Layout) -> Layout:
    """Kronecker product ``f ⊗ g``: every element of ``f`` becomes a tile of ``g``.

    ``h(t, i) = f(t // T_g, i // N_g) * S_g + g(t % T_g, i % N_g)``
    """
    if f.rank != g.rank:
        raise LayoutError(f"cannot compose layouts of rank {f.rank} and {g.rank}")
    modes = []
    for d in range(f.rank):
        modes.append([(f.mode_shape[m], ("f", m)) for m in f.dim_modes(d)]
                     + [(g.mode_shape[m], ("g", m)) for m in g.dim_modes(d)])
    shape = tuple(a * b for a, b in zip(f.shape, g.shape))
    sp = [("f", m) for m in f.spatial_modes] + [("g", m) for m in g.spatial_modes]
    lo = [("f", m) for m in f.local_modes] + [("g", m) for m in g.local_modes]
    return _from_modes(shape, modes, sp, lo)


def _identity(rank: int) -> Layout:
    return local(*([1] * rank))


def divide(h: Layout, g: Layout) -> Optional[Layout]:
    """Return ``f`` with ``compose(f, g) == h``, or ``None`` when none exists.

    Works on the normalized representation: ``g``'s modes are peeled off the
    inner end of each dimension of ``h``. Only the outermost ``g`` mode of a
    dimension can have been merged with an ``f`` mode, so that is the only
    place a mode of ``h`` may need splitting.
    """
    if h.rank != g.rank:
        raise LayoutError(f"cannot divide rank-{h.rank} layout by rank-{g.rank} layout")
    if any(a % b for a, b in zip(h.shape, g.shape)):
        return None
    if h.num_threads % g.num_threads or h.num_locals % g.num_locals:
        return None

    cls_h = {m: "s" for m in h.spatial_modes} | {m: "l" for m in h.local_modes}
    cls_g = {m: "s" for m in g.spatial_modes} | {m: "l" for m in g.local_modes}
    # h modes as mutable keys; splitting a mode yields an ("outer", m) key
    order = {"s": [("h", m) for m in h.spatial_modes], "l": [("h", m) for m in h.local_modes]}
    f_modes: list[list] = []
    g_match: dict = {}  # g mode -> key in h
    ext = {("h", m): h.mode_shape[m] for m in range(len(h.mode_shape))}

    for d in range(h.rank):
        hm = [("h", m) for m in h.dim_modes(d)]
        gm = g.dim_modes(d)
        if len(gm) > len(hm):
            return None
        keep = hm[: len(hm) - len(gm)]
        tail = hm[len(hm) - len(gm):]
        for j, (key, m) in enumerate(zip(tail, gm)):
            e = g.mode_shape[m]
            if cls_h[key[1]] != cls_g[m]:
                return None
            if ext[key] == e:
                g_match[m] = key
            elif j == 0 and ext[key] % e == 0:
                outer = ("outer", key[1])
                ext[outer] = ext[key] // e
                ext[key] = e
                lst = order[cls_g[m]]
                lst.insert(lst.index(key), outer)
                keep.append(outer)
                g_match[m] = key
            else:
                return None
        f_modes.append([(ext[k], k) for k in keep])

    for c, g_list in (("s", g.spatial_modes), ("l", g.local_modes)):
        want = [g_match[m] for m in g_list]
        lst = order[c]
        if len(want) > len(lst) or lst[len(lst) - len(want):] != want:
            return None
        order[c] = lst[: len(lst) - len(want)]

    shape = tuple(a // b for a, b in zip(h.shape, g.shape))
    try:
        f = _from_modes(shape, f_modes, order["s"], order["l"])
    except LayoutError:
        return None
    if compose(f, g) != h:
        return None
    return f


def _check_ti(lay: Layout, t: int, i: int):
    if not 0 <= t < lay.num_threads:
        raise LayoutError(f"thread index {t} out of range [0, {lay.num_threads})")
    if not 0 <= i < lay.num_locals:
        raise LayoutError(f"local index {i} out of range [0, {lay.num_locals})")


def evaluate(lay: Layout, t: int, i: int) -> tuple[int, ...]:
    """Logical index held in slot ``i`` of thread ``t``."""
    _check_ti(lay, t, i)
    coord = [0] * len(lay.mode_shape)
    for ms, k in ((lay.spatial_modes, t), (lay.local_modes, i)):
        for m, c in zip(ms, unravel(k, [lay.mode_shape[m] for m in ms]) if ms else []):
            coord[m] = c
    out = []
    for d in range(lay.rank):
        ms = lay.dim_modes(d)
        out.append(ravel([coord[m] for m in ms], [lay.mode_shape[m] for m in ms]) if ms else 0)
    return tuple(out)


def invert(lay: Layout, idx: Sequence[int]) -> tuple[int, int]:
    """The ``(thread, slot)`` pair holding logical index ``idx``."""
    idx = tuple(idx)
    if len(idx) != lay.rank or any(not 0 <= c < s for c, s in zip(idx, lay.shape)):
        raise LayoutError(f"index {list(idx)} out of bounds for shape {list(lay.shape)}")
    coord = [0] * len(lay.mode_shape)
    for d in range(lay.rank):
        ms = lay.dim_modes(d)
        if ms:
            for m, c in zip(ms, unravel(idx[d], [lay.mode_shape[m] for m in ms])):
                coord[m] = c
    t = ravel([coord[m] for m in lay.spatial_modes], [lay.mode_shape[m] for m in lay.spatial_modes])
    i = ravel([coord[m] for m in lay.local_modes], [lay.mode_shape[m] for m in lay.local_modes])
    return t, i


@lru_cache(maxsize=512)
def _table(lay: Layout) -> np.ndarray:
    T, N = lay.num_threads, lay.num_locals
    t = np.repeat(np.arange(T, dtype=np.int64), N)
    i = np.tile(np.arange(N, dtype=np.int64), T)
    coord = [None] * len(lay.mode_shape)
    for ms, k in ((lay.spatial_modes, t), (lay.local_modes, i)):
        if ms:
            for m, c in zip(ms, _unravel_many(k, [lay.mode_shape[m] for m in ms])):
                coord[m] = c
    out = np.zeros((T * N, lay.rank), dtype=np.int64)
    for d in range(lay.rank):
        acc = np.zeros(T * N, dtype=np.int64)
        for m in lay.dim_modes(d):
            acc = acc * lay.mode_shape[m] + coord[m]
        out[:, d] = acc
    out = out.reshape(T, N, lay.rank)
    out.setflags(write=False)
    return out


_LDMATRIX_TILE = None


def divides_for_ldmatrix(lay: Layout) -> bool:
    """Whether a 2-D layout is divisible by ``spatial(8, 4).local(1, 4)``."""
    global _LDMATRIX_TILE
    if lay.rank != 2:
        return False
    if _LDMATRIX_TILE is None:
        _LDMATRIX_TILE = compose(spatial(8, 4), local(1, 4))
    return divide(lay, _LDMATRIX_TILE) is not None


# -- text form ------------------------------------------------------------

_PRIMS = {
    "local": local,
    "spatial": spatial,
    "column_local": column_local,
    "column_spatial": column_spatial,
}
_TERM = re.compile(r"\s*(column_local|column_spatial|local|spatial)\s*\(([^()]*)\)\s*")


def parse_layout(text: str) -> Layout:
    """Parse ``local(2,1).spatial(8,4).local(1,2)``-style expressions."""
    pos = 0
    out = None
    text = text.strip()
    if not text:
        raise LayoutError("empty layout expression")
    while True:
        m = _TERM.match(text, pos)
        if not m:
            raise LayoutError(f"cannot parse layout expression {text!r} at position {pos}")
        try:
            dims = [int(x) for x in m.group(2).split(",") if x.strip()]
        except ValueError:
            raise LayoutError(f"non-integer extent in {m.group(0).strip()!r}") from None
        term = _PRIMS[m.group(1)](*dims)
        out = term if out is None else compose(out, term)
        pos = m.end()
        if pos == len(text):
            return out
        if text[pos] != ".":
            raise LayoutError(f"expected '.' at position {pos} in {text!r}")
        pos += 1


def _to_text(lay: Layout) -> str:
    """Write a layout as a product of primitives.

    Modes are emitted in an order compatible with both the per-dimension
    nesting and the thread/slot orderings; consecutive same-class modes of
    increasing dimension share one primitive. Layouts whose orderings cannot
    be reconciled have no primitive-product form and raise ``LayoutError``.
    """
    n = len(lay.mode_shape)
    cls = {m: "spatial" for m in lay.spatial_modes} | {m: "local" for m in lay.local_modes}
    preds = {m: set() for m in range(n)}
    for d in range(lay.rank):
        ms = lay.dim_modes(d)
        for a, b in zip(ms, ms[1:]):
            preds[b].add(a)
    for ms in (lay.spatial_modes, lay.local_modes):
        for a, b in zip(ms, ms[1:]):
            preds[b].add(a)

    done: list[int] = []
    remaining = set(range(n))
    groups: list[tuple[str, list[int]]] = []
    while remaining:
        ready = sorted((m for m in remaining if preds[m] <= set(done)),
                       key=lambda m: (lay.mode_dims[m], m))
        if not ready:
            raise LayoutError("layout is not expressible as a product of primitive layouts")
        pick = None
        if groups:
            c, ms = groups[-1]
            for m in ready:
                if cls[m] != c:
                    continue
                lo_dim, hi_dim = lay.mode_dims[ms[0]], lay.mode_dims[ms[-1]]
                d = lay.mode_dims[m]
                if len(ms) == 1 and d != lo_dim:
                    pick = m
                elif len(ms) > 1 and hi_dim > lo_dim and d > hi_dim:
                    pick = m
                elif len(ms) > 1 and hi_dim < lo_dim and d < hi_dim:
                    pick = m
                if pick is not None:
                    break
        if pick is not None:
            groups[-1][1].append(pick)
        else:
            pick = ready[0]
            groups.append((cls[pick], [pick]))
        done.append(pick)
        remaining.discard(pick)

    if not groups:
        return "local(" + ", ".join("1" for _ in lay.shape) + ")"
    terms = []
    for c, ms in groups:
        dims = [1] * lay.rank
        for m in ms:
            dims[lay.mode_dims[m]] = lay.mode_shape[m]
        column = len(ms) > 1 and lay.mode_dims[ms[0]] > lay.mode_dims[ms[-1]]
        name = f"column_{c}" if column else c
        terms.append(f"{name}({', '.join(map(str, dims))})")
    return ".".join(terms)


def render_grid(lay: Layout) -> str:
    """ASCII grid with ``t<thread>:<slot>`` in every cell.

    1-D layouts render as a single row; higher ranks fold leading dimensions
    into rows.
    """
    shape = lay.shape
    cols = shape[-1]
    rows = math.prod(shape[:-1]) if len(shape) > 1 else 1
    cells = [["" for _ in range(cols)] for _ in range(rows)]
    tab = lay.table()
    for t in range(lay.num_threads):
        for i in range(lay.num_locals):
            idx = tab[t, i]
            r = int(np.ravel_multi_index(tuple(idx[:-1]), shape[:-1])) if len(shape) > 1 else 0
            cells[r][int(idx[-1])] = f"t{t}:{i}"
    width = max(len(c) for row in cells for c in row)
    lines = [" ".join(c.rjust(width) for c in row) for row in cells]
    return "\n".join(lines)


def layouts_equal_by_table(a: Layout, b: Layout) -> bool:
    """Semantic equality: identical shapes and mapping tables."""
    return a.shape == b.shape and a.table().shape == b.table().shape and bool(
        np.array_equal(a.table(), b.table()))


def primitive_product(parts: Iterable[Layout]) -> Layout:
    out = None
    for p in parts:
        out = p if out is None else compose(out, p)
    if out is None:
        raise LayoutError("empty product")
    return out
