"""Deterministic CPU interpreter for block-level programs.

Blocks run one after another (row-major grid order by default) and the
instructions of a block run strictly in order, so ``Synchronize`` only shows
up in the trace. Register tensors keep, for every thread, the raw codes of its
local slots; slot ``i`` of thread ``t`` holds the element at
``layout(t, i)``, and a thread's bit string is its slot codes concatenated
least-significant first.
"""

from __future__ import annotations

import json
import math
import os
import random
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .dtypes import ScalarType, as_dtype, decode_array, encode_array, f32
from .ir import (BOUNDS_MODES, Assign, EvalError, For, If, Instr, LaunchError, Program, While,
                 eval_expr, eval_grid, format_path, walk)
from .layout import Layout, LayoutError
from .packing import PackedBuffer, gather_codes, packed_nbytes, scatter_codes

__all__ = [
    "ExecutionError", "GlobalMemory", "GlobalTensor", "SharedTensor", "RegisterTensor",
    "SharedAllocator", "plan_shared_memory", "plan_global_workspace", "run", "RunResult",
    "reinterpret", "STATIC_KINDS", "HANDLERS",
]

DEFAULT_SHARED_CAPACITY = 64 * 1024
SHARED_ALIGN = 16
GLOBAL_ALIGN = 256
STATIC_KINDS = frozenset({"undefined", "scope", "shape", "dtype", "reinterpret", "arg"})


class ExecutionError(RuntimeError):
    """Runtime failure, tagged with the block and instruction position."""

    def __init__(self, kind: str, message: str, block=None, pos=None, op=None):
        self.kind, self.block, self.pos, self.op = kind, block, pos, op
        where = []
        if block is not None:
            where.append(f"block {tuple(block)}")
        if pos is not None:
            where.append(f"instruction {pos}")
        if op:
            where.append(op)
        super().__init__(f"[{kind}] {message}" + (f" ({', '.join(where)})" if where else ""))

    @property
    def static_class(self) -> bool:
        return self.kind in STATIC_KINDS


class ProgramInvalid(ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("program failed validation:\n" + "\n".join(f"  {d}" for d in self.diagnostics))


# -- memory -----------------------------------------------------------------

@dataclass
class _Allocation:
    name: str
    addr: int
    data: np.ndarray
    init: np.ndarray

    @property
    def end(self) -> int:
        return self.addr + self.data.size


class GlobalMemory:
    """Byte-addressed store made of non-overlapping allocations."""

    def __init__(self):
        self.allocations: list[_Allocation] = []
        self._next = GLOBAL_ALIGN

    def allocate(self, nbytes: int, name: str, data=None, zero: bool = True) -> int:
        addr = self._next
        buf = np.zeros(max(nbytes, 0), dtype=np.uint8)
        init = np.full(buf.size, zero or data is not None, dtype=bool)
        if data is not None:
            src = np.frombuffer(bytes(data), dtype=np.uint8)
            if src.size != nbytes:
                raise ValueError(f"{name}: expected {nbytes} bytes, got {src.size}")
            buf[:] = src
        self.allocations.append(_Allocation(name, addr, buf, init))
        self._next = addr + -(-max(nbytes, 1) // GLOBAL_ALIGN) * GLOBAL_ALIGN
        return addr

    def find(self, addr: int, nbytes: int) -> _Allocation:
        for a in self.allocations:
            if a.addr <= addr and addr + nbytes <= a.end:
                return a
        raise KeyError(addr)

    def by_name(self, name: str) -> _Allocation:
        return next(a for a in self.allocations if a.name == name)


@dataclass
class GlobalTensor:
    dtype: ScalarType
    shape: tuple
    strides: tuple
    addr: int
    alloc: _Allocation = field(repr=False)

    @property
    def rank(self) -> int:
        return len(self.shape)

    def summary(self) -> str:
        return f"global {self.dtype.name}{list(self.shape)}@{self.addr:#x}"


@dataclass
class SharedTensor:
    dtype: ScalarType
    shape: tuple
    offset: int

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def nbytes(self) -> int:
        return packed_nbytes(math.prod(self.shape), self.dtype.bits)

    def summary(self) -> str:
        return f"shared {self.dtype.name}{list(self.shape)}+{self.offset}"


@lru_cache(maxsize=1024)
def _layout_text(lay: Layout) -> str:
    return str(lay)


@dataclass
class RegisterTensor:
    """Per-thread slot codes, shape ``(num_threads, num_locals)``."""

    dtype: ScalarType
    layout: Layout
    codes: np.ndarray

    def __post_init__(self):
        want = (self.layout.num_threads, self.layout.num_locals)
        if self.codes.shape != want:
            raise ValueError(f"register storage shape {self.codes.shape} != {want}")

    @property
    def shape(self) -> tuple:
        return self.layout.shape

    @property
    def num_threads(self) -> int:
        return self.layout.num_threads

    @property
    def bits_per_thread(self) -> int:
        return self.layout.num_locals * self.dtype.bits

    def thread_bits(self, t: int) -> int:
        """Thread ``t``'s storage as one integer bit string (slot 0 in the low bits)."""
        out = 0
        for i, c in enumerate(self.codes[t]):
            out |= int(c) << (i * self.dtype.bits)
        return out

    def values(self) -> np.ndarray:
        return decode_array(self.dtype, self.codes)

    def to_logical(self) -> np.ndarray:
        vals = self.values()
        out = np.zeros(self.shape, dtype=vals.dtype)
        tab = self.layout.table()
        out[tuple(tab[..., d] for d in range(self.layout.rank))] = vals
        return out

    def logical_codes(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.uint64)
        tab = self.layout.table()
        out[tuple(tab[..., d] for d in range(self.layout.rank))] = self.codes
        return out

    @classmethod
    def from_logical(cls, dtype, layout: Layout, values) -> "RegisterTensor":
        dtype = as_dtype(dtype)
        values = np.asarray(values)
        tab = layout.table()
        gathered = values[tuple(tab[..., d] for d in range(layout.rank))]
        return cls(dtype, layout, encode_array(dtype, gathered).reshape(tab.shape[:2]))

    @classmethod
    def from_logical_codes(cls, dtype, layout: Layout, codes) -> "RegisterTensor":
        tab = layout.table()
        codes = np.asarray(codes, dtype=np.uint64)
        return cls(as_dtype(dtype), layout, codes[tuple(tab[..., d] for d in range(layout.rank))].copy())

    def summary(self) -> str:
        return f"register {self.dtype.name}{list(self.shape)} {_layout_text(self.layout)}"


def _thread_bit_matrix(codes: np.ndarray, bits: int) -> np.ndarray:
    j = np.arange(bits, dtype=np.uint64)
    return ((codes[..., None] >> j) & np.uint64(1)).reshape(codes.shape[0], -1)


def reinterpret(src: RegisterTensor, dtype, layout: Layout) -> RegisterTensor:
    """Retype a register tensor without moving any bit between threads."""
    dtype = as_dtype(dtype)
    new_bits = layout.num_locals * dtype.bits
    if src.num_threads != layout.num_threads or src.bits_per_thread != new_bits:
        raise ExecutionError(
            "reinterpret",
            f"cannot reinterpret {src.num_threads} threads x {src.bits_per_thread} bits as "
            f"{layout.num_threads} threads x {new_bits} bits")
    if dtype.bits == src.dtype.bits:
        return RegisterTensor(dtype, layout, src.codes.copy())
    bitm = _thread_bit_matrix(src.codes, src.dtype.bits)
    bitm = bitm.reshape(layout.num_threads, layout.num_locals, dtype.bits)
    weights = np.uint64(1) << np.arange(dtype.bits, dtype=np.uint64)
    return RegisterTensor(dtype, layout, (bitm * weights).sum(axis=-1, dtype=np.uint64))


# -- planning ---------------------------------------------------------------

class SharedAllocator:
    """Bump allocator over a block's shared memory, 16-byte aligned."""

    def __init__(self, capacity: int = DEFAULT_SHARED_CAPACITY, align: int = SHARED_ALIGN):
        self.capacity = capacity
        self.align = align
        self.top = 0

    def allocate(self, nbytes: int) -> int:
        off = -(-self.top // self.align) * self.align
        if off + nbytes > self.capacity:
            raise ExecutionError(
                "capacity", f"shared allocation of {nbytes} B at offset {off} exceeds "
                            f"capacity {self.capacity} B")
        self.top = off + nbytes
        return off


def plan_shared_memory(program: Program, capacity: int = DEFAULT_SHARED_CAPACITY):
    """Give every ``AllocateShared`` a fixed region; returns ``(offsets, total_bytes)``."""
    alloc = SharedAllocator(capacity)
    offsets = {}
    for path, s in walk(program.body):
        if isinstance(s, Instr) and s.op == "AllocateShared":
            t = s.args["dtype"]
            try:
                offsets[path] = alloc.allocate(packed_nbytes(math.prod(s.args["shape"]), t.bits))
            except ExecutionError as e:
                raise ExecutionError("capacity", str(e).split("] ", 1)[1], pos=format_path(path),
                                     op="AllocateShared") from None
    return offsets, alloc.top


def plan_global_workspace(program: Program, args: dict):
    """Lay out every ``AllocateGlobal`` in one workspace shared by all blocks."""
    offsets = {}
    top = 0
    for path, s in walk(program.body):
        if isinstance(s, Instr) and s.op == "AllocateGlobal":
            try:
                shape = [eval_expr(e, args) for e in s.args["shape"]]
            except EvalError as e:
                raise ExecutionError("arg", f"AllocateGlobal shape must depend on parameters only: {e}",
                                     pos=format_path(path), op="AllocateGlobal") from None
            top = -(-top // GLOBAL_ALIGN) * GLOBAL_ALIGN
            offsets[path] = (top, tuple(shape), s.args.get("zero", True))
            top += packed_nbytes(math.prod(shape), s.args["dtype"].bits)
    return offsets, top


# -- execution --------------------------------------------------------------

@dataclass
class RunResult:
    buffers: dict
    trace: list
    grid: tuple
    writes: list = field(default_factory=list)

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.trace)


def _to_packed(name, v) -> PackedBuffer:
    if isinstance(v, PackedBuffer):
        return v.copy()
    arr = np.asarray(v)
    kind = {"f": "f", "i": "i", "u": "u"}.get(arr.dtype.kind)
    if kind is None:
        raise TypeError(f"buffer {name!r}: unsupported array dtype {arr.dtype}")
    dt = as_dtype(f"{kind}{arr.dtype.itemsize * 8}")
    return PackedBuffer.from_values(dt, arr)


class _Block:
    def __init__(self, idx, env, shared_bytes):
        self.idx = idx
        self.env = env
        self.shared = np.zeros(max(shared_bytes, 1), dtype=np.uint8)
        self.shared_init = np.zeros(self.shared.size, dtype=bool)


class Machine:
    """One program launch. Not reentrant: one ``run`` at a time."""

    def __init__(self, program: Program, args: dict, buffers: dict, *, bounds: Optional[str] = None,
                 shared_capacity: int = DEFAULT_SHARED_CAPACITY, strict_init: bool = True,
                 trace: bool = True, record_writes: bool = False, max_loop_iters: int = 1_000_000):
        self.program = program
        self.args = dict(args)
        self.bounds = bounds or os.environ.get("TILEVM_BOUNDS", "strict")
        if self.bounds not in BOUNDS_MODES:
            raise ValueError(f"bounds mode must be one of {BOUNDS_MODES}, got {self.bounds!r}")
        self.shared_capacity = shared_capacity
        self.strict_init = strict_init
        self.tracing = trace
        self.record_writes = record_writes
        self.max_loop_iters = max_loop_iters
        self.trace: list = []
        self.writes: list = []
        self.memory = GlobalMemory()
        self.env0: dict = {}
        self._bind(buffers)

    def _bind(self, buffers: dict):
        p = self.program
        self.buffer_shapes = {}
        for q in p.params:
            if q.type == "ptr":
                if q.name not in buffers:
                    raise LaunchError(f"no buffer bound to pointer parameter {q.name!r}")
                buf = _to_packed(q.name, buffers[q.name])
                self.buffer_shapes[q.name] = (buf.dtype, buf.shape)
                self.env0[q.name] = self.memory.allocate(buf.nbytes, q.name, buf.data)
            else:
                if q.name not in self.args:
                    raise LaunchError(f"missing launch argument {q.name!r}")
                v = self.args[q.name]
                self.env0[q.name] = v
        extra = set(buffers) - {q.name for q in p.params if q.type == "ptr"}
        if extra:
            raise LaunchError(f"buffers bound to unknown parameters: {sorted(extra)}")
        scalar_args = {q.name: self.args[q.name] for q in p.params if q.type != "ptr"}
        self.grid = eval_grid(p, scalar_args)
        self.shared_offsets, self.shared_bytes = plan_shared_memory(p, self.shared_capacity)
        self.ws_offsets, ws_bytes = plan_global_workspace(p, scalar_args)
        self.workspace = None
        if self.ws_offsets:
            self.workspace = self.memory.allocate(ws_bytes, "__workspace__")
            ws = self.memory.by_name("__workspace__")
            ws.init[:] = False
            for path, (off, shape, zero) in self.ws_offsets.items():
                instr = _instr_at(p.body, path)
                n = packed_nbytes(math.prod(shape), instr.args["dtype"].bits)
                if zero:
                    ws.init[off:off + n] = True

    # -- driver ---------------------------------------------------------

    def block_indices(self, order="row-major", seed: int = 0) -> list:
        blocks = [tuple(int(x) for x in b) for b in np.ndindex(*self.grid)]
        if order == "row-major":
            return blocks
        if order == "shuffle":
            random.Random(seed).shuffle(blocks)
            return blocks
        order = [tuple(b) for b in order]
        if sorted(order) != blocks:
            raise ValueError("explicit block order must be a permutation of the grid")
        return order

    def run(self, order="row-major", seed: int = 0) -> RunResult:
        for idx in self.block_indices(order, seed):
            blk = _Block(idx, dict(self.env0), self.shared_bytes)
            self._exec_body(self.program.body, blk, ())
        out = {}
        for q in self.program.params:
            if q.type == "ptr":
                a = self.memory.by_name(q.name)
                dt, shape = self.buffer_shapes[q.name]
                out[q.name] = PackedBuffer(dt, shape, bytearray(a.data.tobytes()))
        return RunResult(out, self.trace, self.grid, self.writes)

    def _exec_body(self, body, blk: _Block, path):
        for k, s in enumerate(body):
            p = path + (k,)
            if isinstance(s, Instr):
                self._exec_instr(s, blk, p)
            elif isinstance(s, If):
                if self._eval(s.cond, blk, p):
                    self._exec_body(s.then, blk, p + ("then",))
                else:
                    self._exec_body(s.orelse, blk, p + ("else",))
            elif isinstance(s, For):
                start, stop, step = (self._eval(e, blk, p) for e in (s.start, s.stop, s.step))
                if step == 0:
                    raise ExecutionError("arg", "for-loop step is zero", blk.idx, format_path(p))
                for v in range(start, stop, step):
                    blk.env[s.var] = v
                    self._exec_body(s.body, blk, p)
            elif isinstance(s, While):
                n = 0
                while self._eval(s.cond, blk, p):
                    n += 1
                    if n > self.max_loop_iters:
                        raise ExecutionError("loop", f"while-loop exceeded {self.max_loop_iters} iterations",
                                             blk.idx, format_path(p))
                    self._exec_body(s.body, blk, p)
            elif isinstance(s, Assign):
                blk.env[s.var] = self._eval(s.value, blk, p)

    def _eval(self, e, blk, path):
        try:
            return eval_expr(e, blk.env)
        except EvalError as exc:
            kind = "undefined" if "undefined" in str(exc) else "division"
            raise ExecutionError(kind, str(exc), blk.idx, format_path(path)) from None

    def _exec_instr(self, s: Instr, blk: _Block, path):
        ctx = _Ctx(self, blk, s, path)
        handler = HANDLERS[s.op]
        try:
            result = handler(ctx)
        except ExecutionError as e:
            if e.block is None:
                e = ExecutionError(e.kind, str(e).split("] ", 1)[-1], blk.idx, format_path(path), s.op)
            raise e from None
        except (LayoutError, ValueError, TypeError) as e:
            raise ExecutionError("arg", str(e), blk.idx, format_path(path), s.op) from None
        if isinstance(result, RegisterTensor) and s.out is not None:
            dst = ctx.var(s.out)
            if not isinstance(dst, RegisterTensor):
                raise ExecutionError("scope", f"out={s.out!r} is not a register tensor", blk.idx,
                                     format_path(path), s.op)
            if dst.dtype != result.dtype or dst.layout != result.layout:
                raise ExecutionError(
                    "dtype", f"out={s.out!r} is {dst.summary()}, result is {result.summary()}",
                    blk.idx, format_path(path), s.op)
            dst.codes[...] = result.codes
            result = dst
        if s.result is not None:
            if isinstance(s.result, tuple):
                for name, v in zip(s.result, result):
                    blk.env[name] = v
            else:
                blk.env[s.result] = result
        if self.tracing:
            rec = {"block": list(blk.idx), "pos": format_path(path), "op": s.op,
                   "operands": ctx.operands}
            if isinstance(result, (RegisterTensor, GlobalTensor, SharedTensor)):
                rec["result"] = result.summary()
            rec.update(ctx.extra)
            self.trace.append(rec)


def _instr_at(body, path):
    node = None
    seq = body
    for k in path:
        if isinstance(k, str):
            seq = node.then if k == "then" else node.orelse
            continue
        node = seq[k]
        if isinstance(node, (For, While)):
            seq = node.body
    return node


class _Ctx:
    """Operand access for one instruction execution."""

    def __init__(self, m: Machine, blk: _Block, s: Instr, path):
        self.m, self.blk, self.s, self.path = m, blk, s, path
        self.operands: dict = {}
        self.extra: dict = {}

    def arg(self, key, default=None):
        return self.s.args.get(key, default)

    def var(self, name):
        try:
            return self.blk.env[name]
        except KeyError:
            raise ExecutionError("undefined", f"undefined variable {name!r}") from None

    def tensor(self, key, cls):
        name = self.s.args[key]
        v = self.var(name)
        if not isinstance(v, cls):
            want = {GlobalTensor: "global", SharedTensor: "shared", RegisterTensor: "register"}[cls]
            got = getattr(v, "summary", lambda: type(v).__name__)()
            raise ExecutionError("scope", f"{key}={name!r} must be a {want} tensor, got {got}")
        self.operands[key] = f"{name}: {v.summary()}"
        return v

    def expr(self, e):
        try:
            return eval_expr(e, self.blk.env)
        except EvalError as exc:
            kind = "undefined" if "undefined" in str(exc) else "division"
            raise ExecutionError(kind, str(exc)) from None

    def exprs(self, key, default=None):
        es = self.s.args.get(key)
        if es is None:
            return default
        vals = [self.expr(e) for e in es]
        self.operands[key] = vals
        return vals


# -- element addressing -----------------------------------------------------

def _tile_coords(view_shape, offsets, tile_coords: np.ndarray) -> np.ndarray:
    """Full view coordinates for tile coordinates occupying the trailing dims."""
    rank, r = len(view_shape), tile_coords.shape[-1]
    if len(offsets) != rank:
        raise ExecutionError("shape", f"{len(offsets)} offsets for a rank-{rank} tensor")
    if r > rank:
        raise ExecutionError("shape", f"rank-{r} tile does not fit a rank-{rank} tensor")
    full = np.broadcast_to(np.asarray(offsets, dtype=np.int64),
                           tile_coords.shape[:-1] + (rank,)).copy()
    full[..., rank - r:] += tile_coords
    return full


def _in_bounds(coords: np.ndarray, shape) -> np.ndarray:
    return np.all((coords >= 0) & (coords < np.asarray(shape, dtype=np.int64)), axis=-1)


def _global_bitpos(view: GlobalTensor, coords: np.ndarray) -> np.ndarray:
    lin = (coords * np.asarray(view.strides, dtype=np.int64)).sum(axis=-1)
    return (view.addr - view.alloc.addr) * 8 + lin * view.dtype.bits


def _check_init(init: np.ndarray, bitpos: np.ndarray, bits: int, what: str):
    first = bitpos >> 3
    last = (bitpos + bits - 1) >> 3
    if not (init[first].all() and init[last].all()):
        raise ExecutionError("uninitialized", f"read of uninitialized {what} memory")


def _mark_init(init: np.ndarray, bitpos: np.ndarray, bits: int):
    init[bitpos >> 3] = True
    init[(bitpos + bits - 1) >> 3] = True


def _gather_global(ctx: _Ctx, view: GlobalTensor, coords: np.ndarray, mode: str) -> np.ndarray:
    ok = _in_bounds(coords, view.shape)
    if not ok.all():
        if mode == "strict":
            bad = coords[~ok][0].tolist()
            raise ExecutionError("bounds", f"index {bad} outside {view.summary()}")
    safe = np.where(ok[..., None], coords, 0)
    pos = _global_bitpos(view, safe)
    if ctx.m.strict_init:
        _check_init(view.alloc.init, pos[ok], view.dtype.bits, "global")
    codes = gather_codes(view.alloc.data, pos, view.dtype.bits)
    return np.where(ok, codes, np.uint64(0))


def _scatter_global(ctx: _Ctx, view: GlobalTensor, coords: np.ndarray, codes: np.ndarray):
    ok = _in_bounds(coords, view.shape)
    if not ok.all():
        bad = coords[~ok][0].tolist()
        raise ExecutionError("bounds", f"store index {bad} outside {view.summary()}")
    pos = _global_bitpos(view, coords).reshape(-1)
    scatter_codes(view.alloc.data, pos, codes.reshape(-1), view.dtype.bits)
    _mark_init(view.alloc.init, pos, view.dtype.bits)
    if ctx.m.record_writes:
        ctx.m.writes.append((ctx.blk.idx, view.alloc.name, pos.copy(), view.dtype.bits))


def _shared_bitpos(t: SharedTensor, coords: np.ndarray) -> np.ndarray:
    strides = np.asarray(_row_major_strides(t.shape), dtype=np.int64)
    return t.offset * 8 + (coords * strides).sum(axis=-1) * t.dtype.bits


def _row_major_strides(shape) -> tuple:
    out, acc = [], 1
    for n in reversed(shape):
        out.append(acc)
        acc *= n
    return tuple(reversed(out))


def _check_shared(coords, t: SharedTensor):
    ok = _in_bounds(coords, t.shape)
    if not ok.all():
        bad = coords[~ok][0].tolist()
        raise ExecutionError("bounds", f"index {bad} outside {t.summary()}")


# -- instruction handlers ---------------------------------------------------

def _block_indices(ctx: _Ctx):
    ctx.extra["value"] = list(ctx.blk.idx)
    return tuple(ctx.blk.idx)


def _global_view(ctx: _Ctx):
    dtype = ctx.arg("dtype")
    addr = ctx.expr(ctx.arg("ptr"))
    shape = tuple(ctx.exprs("shape"))
    if any(not isinstance(n, int) or n < 0 for n in shape):
        raise ExecutionError("shape", f"bad view shape {list(shape)}")
    strides = ctx.exprs("strides") or _row_major_strides(shape)
    if len(strides) != len(shape):
        raise ExecutionError("shape", "strides and shape differ in length")
    ctx.operands["ptr"] = addr
    max_lin = sum((n - 1) * st for n, st in zip(shape, strides)) if all(shape) else -1
    nbytes = packed_nbytes(max_lin + 1, dtype.bits)
    try:
        alloc = ctx.m.memory.find(addr, nbytes)
    except KeyError:
        raise ExecutionError("bounds", f"view {dtype.name}{list(shape)} at {addr:#x} "
                                       f"({nbytes} B) is not inside any allocation") from None
    return GlobalTensor(dtype, shape, tuple(strides), addr, alloc)


def _allocate_global(ctx: _Ctx):
    off, shape, _ = ctx.m.ws_offsets[ctx.path]
    ws = ctx.m.memory.by_name("__workspace__")
    dtype = ctx.arg("dtype")
    return GlobalTensor(dtype, shape, _row_major_strides(shape), ws.addr + off, ws)


def _allocate_shared(ctx: _Ctx):
    return SharedTensor(ctx.arg("dtype"), tuple(ctx.arg("shape")), ctx.m.shared_offsets[ctx.path])


def _allocate_register(ctx: _Ctx):
    dtype, lay = ctx.arg("dtype"), ctx.arg("layout")
    shape = ctx.arg("shape")
    if shape is not None and tuple(shape) != lay.shape:
        raise ExecutionError("shape", f"shape {list(shape)} does not match layout shape {list(lay.shape)}")
    init = ctx.arg("init", 0)
    code = encode_array(dtype, np.array([init]))[0]
    return RegisterTensor(dtype, lay, np.full((lay.num_threads, lay.num_locals), code, dtype=np.uint64))


def _load_global(ctx: _Ctx):
    view = ctx.tensor("src", GlobalTensor)
    lay = ctx.arg("layout")
    mode = ctx.arg("bounds") or ctx.m.bounds
    offsets = ctx.exprs("offsets")
    coords = _tile_coords(view.shape, offsets, lay.table())
    codes = _gather_global(ctx, view, coords, mode)
    ctx.extra["access"] = "byte" if view.dtype.bits % 8 == 0 else "bitwise"
    return RegisterTensor(view.dtype, lay, codes)


def _store_global(ctx: _Ctx):
    reg = ctx.tensor("src", RegisterTensor)
    view = ctx.tensor("dst", GlobalTensor)
    if reg.dtype != view.dtype:
        raise ExecutionError("dtype", f"storing {reg.dtype.name} into {view.dtype.name} view")
    coords = _tile_coords(view.shape, ctx.exprs("offsets"), reg.layout.table())
    _scatter_global(ctx, view, coords, reg.codes)
    ctx.extra["access"] = "byte" if view.dtype.bits % 8 == 0 else "bitwise"


def _copy_global_to_shared(ctx: _Ctx):
    view = ctx.tensor("src", GlobalTensor)
    sh = ctx.tensor("dst", SharedTensor)
    if view.dtype != sh.dtype:
        raise ExecutionError("dtype", f"copying {view.dtype.name} into {sh.dtype.name} shared tensor")
    tile = np.stack(np.meshgrid(*[np.arange(n) for n in sh.shape], indexing="ij"), axis=-1)
    tile = tile.reshape(-1, sh.rank)
    coords = _tile_coords(view.shape, ctx.exprs("offsets"), tile)
    codes = _gather_global(ctx, view, coords, ctx.arg("bounds") or ctx.m.bounds)
    pos = _shared_bitpos(sh, tile)
    scatter_codes(ctx.blk.shared, pos, codes, sh.dtype.bits)
    _mark_init(ctx.blk.shared_init, pos, sh.dtype.bits)
    ctx.extra["access"] = "byte" if view.dtype.bits % 8 == 0 else "bitwise"


def _load_shared(ctx: _Ctx):
    sh = ctx.tensor("src", SharedTensor)
    lay = ctx.arg("layout")
    offsets = ctx.exprs("offsets", [0] * sh.rank)
    coords = _tile_coords(sh.shape, offsets, lay.table())
    _check_shared(coords, sh)
    pos = _shared_bitpos(sh, coords)
    if ctx.m.strict_init:
        _check_init(ctx.blk.shared_init, pos, sh.dtype.bits, "shared")
    return RegisterTensor(sh.dtype, lay, gather_codes(ctx.blk.shared, pos, sh.dtype.bits))


def _store_shared(ctx: _Ctx):
    reg = ctx.tensor("src", RegisterTensor)
    sh = ctx.tensor("dst", SharedTensor)
    if reg.dtype != sh.dtype:
        raise ExecutionError("dtype", f"storing {reg.dtype.name} into {sh.dtype.name} shared tensor")
    coords = _tile_coords(sh.shape, ctx.exprs("offsets", [0] * sh.rank), reg.layout.table())
    _check_shared(coords, sh)
    pos = _shared_bitpos(sh, coords).reshape(-1)
    scatter_codes(ctx.blk.shared, pos, reg.codes.reshape(-1), sh.dtype.bits)
    _mark_init(ctx.blk.shared_init, pos, sh.dtype.bits)


def _reinterpret(ctx: _Ctx):
    src = ctx.tensor("src", RegisterTensor)
    return reinterpret(src, ctx.arg("dtype"), ctx.arg("layout"))


def _cast(ctx: _Ctx):
    src = ctx.tensor("src", RegisterTensor)
    to = ctx.arg("dtype")
    if to == src.dtype:
        return RegisterTensor(to, src.layout, src.codes.copy())
    return RegisterTensor(to, src.layout, encode_array(to, src.values()))


MMA_INPUT_TYPES = ("f16", "bf16", "f32")


def _mma(ctx: _Ctx):
    a = ctx.tensor("a", RegisterTensor)
    b = ctx.tensor("b", RegisterTensor)
    c = ctx.tensor("c", RegisterTensor)
    if a.layout.rank != 2 or b.layout.rank != 2 or c.layout.rank != 2:
        raise ExecutionError("shape", "mma operands must be 2-D")
    (M, K), (K2, N), (M2, N2) = a.shape, b.shape, c.shape
    if K != K2 or M != M2 or N != N2:
        raise ExecutionError("shape", f"mma shapes {list(a.shape)} x {list(b.shape)} + {list(c.shape)} do not conform")
    for name, t in (("a", a), ("b", b)):
        if t.dtype.name not in MMA_INPUT_TYPES:
            raise ExecutionError("dtype", f"mma operand {name} has dtype {t.dtype.name}; cast it to f16/bf16/f32 first")
    if c.dtype != f32:
        raise ExecutionError("dtype", f"mma accumulator must be f32, got {c.dtype.name}")
    lay = ctx.arg("layout") or c.layout
    if lay.shape != (M, N):
        raise ExecutionError("shape", f"result layout shape {list(lay.shape)} != {[M, N]}")
    A = a.to_logical().astype(np.float32)
    B = b.to_logical().astype(np.float32)
    acc = c.to_logical().astype(np.float32)
    for k in range(K):
        acc = acc + A[:, k:k + 1] * B[k:k + 1, :]
    return RegisterTensor.from_logical(f32, lay, acc)


_BINARY = {
    "add": np.add, "sub": np.subtract, "mul": np.multiply, "max": np.maximum, "min": np.minimum,
}


def _elementwise(ctx: _Ctx):
    fn = ctx.arg("fn")
    x = ctx.tensor("x", RegisterTensor)
    X = x.to_logical()
    to = ctx.arg("dtype") or x.dtype
    if fn in ("neg", "abs"):
        if ctx.arg("y") is not None or ctx.arg("scalar") is not None:
            raise ExecutionError("arg", f"{fn} takes one operand")
        out = -X if fn == "neg" else np.abs(X)
    else:
        if (ctx.arg("y") is None) == (ctx.arg("scalar") is None):
            raise ExecutionError("arg", f"{fn} needs exactly one of y / scalar")
        if ctx.arg("y") is not None:
            y = ctx.tensor("y", RegisterTensor)
            if y.layout.rank != x.layout.rank or any(b not in (a, 1) for a, b in zip(x.shape, y.shape)):
                raise ExecutionError("shape", f"cannot broadcast {list(y.shape)} to {list(x.shape)}")
            Y = np.broadcast_to(y.to_logical(), x.shape)
        else:
            Y = ctx.expr(ctx.arg("scalar"))
            ctx.operands["scalar"] = Y
        float_math = x.dtype.is_float or to.is_float or isinstance(Y, float) or (
            isinstance(Y, np.ndarray) and Y.dtype.kind == "f")
        if float_math:
            X = X.astype(np.float64)
            Y = np.asarray(Y, dtype=np.float64)
        if fn == "div":
            if float_math:
                with np.errstate(divide="ignore", invalid="ignore"):
                    out = X / Y
            else:
                if np.any(np.asarray(Y) == 0):
                    raise ExecutionError("division", "integer division by zero")
                out = np.floor_divide(X, Y)
        elif fn in _BINARY:
            out = _BINARY[fn](X, Y)
        else:
            raise ExecutionError("arg", f"unknown elementwise function {fn!r}")
    return RegisterTensor.from_logical(to, x.layout, out)


def _synchronize(ctx: _Ctx):
    return None


def _print(ctx: _Ctx):
    parts = []
    if ctx.arg("message"):
        parts.append(ctx.arg("message"))
    if ctx.arg("src") is not None:
        v = ctx.var(ctx.arg("src"))
        if isinstance(v, RegisterTensor):
            vals = v.to_logical()
            ctx.operands["src"] = f"{ctx.arg('src')}: {v.summary()}"
        elif isinstance(v, SharedTensor):
            tile = np.stack(np.meshgrid(*[np.arange(n) for n in v.shape], indexing="ij"), axis=-1)
            pos = _shared_bitpos(v, tile.reshape(-1, v.rank))
            vals = decode_array(v.dtype, gather_codes(ctx.blk.shared, pos, v.dtype.bits)).reshape(v.shape)
            ctx.operands["src"] = f"{ctx.arg('src')}: {v.summary()}"
        elif isinstance(v, GlobalTensor):
            tile = np.stack(np.meshgrid(*[np.arange(n) for n in v.shape], indexing="ij"), axis=-1)
            pos = _global_bitpos(v, tile.reshape(-1, v.rank))
            vals = decode_array(v.dtype, gather_codes(v.alloc.data, pos, v.dtype.bits)).reshape(v.shape)
            ctx.operands["src"] = f"{ctx.arg('src')}: {v.summary()}"
        else:
            vals = v
        parts.append(np.array2string(np.asarray(vals), threshold=10_000, max_line_width=120))
    ctx.extra["print"] = "\n".join(str(p) for p in parts)


HANDLERS: dict[str, Callable] = {
    "BlockIndices": _block_indices,
    "GlobalView": _global_view,
    "AllocateGlobal": _allocate_global,
    "AllocateShared": _allocate_shared,
    "AllocateRegister": _allocate_register,
    "LoadGlobal": _load_global,
    "StoreGlobal": _store_global,
    "CopyGlobalToShared": _copy_global_to_shared,
    "LoadShared": _load_shared,
    "StoreShared": _store_shared,
    "Reinterpret": _reinterpret,
    "Cast": _cast,
    "Mma": _mma,
    "Elementwise": _elementwise,
    "Synchronize": _synchronize,
    "Print": _print,
}


def run(program: Program, args: Optional[dict] = None, buffers: Optional[dict] = None, *,
        check: bool = True, order="row-major", seed: int = 0, **options) -> RunResult:
    """Launch ``program`` over its whole grid.

    ``buffers`` binds every pointer parameter to a :class:`PackedBuffer` or
    numpy array; all of them are returned (post-run contents) in
    ``RunResult.buffers``. ``order`` is ``"row-major"``, ``"shuffle"`` (seeded by
    ``seed``) or an explicit list of block indices. With ``check`` the program
    is validated against ``args`` first.
    """
    args = dict(args or {})
    buffers = dict(buffers or {})
    if check:
        from .validate import validate
        diags = validate(program, args, shared_capacity=options.get("shared_capacity",
                                                                     DEFAULT_SHARED_CAPACITY))
        if diags:
            raise ProgramInvalid(diags)
    return Machine(program, args, buffers, **options).run(order, seed)
