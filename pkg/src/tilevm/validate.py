"""Static checks over programs.

``validate`` never raises on a malformed program; it returns a list of
:class:`Diagnostic` records. When launch arguments are supplied, parameter
values feed an interval analysis that lets tile bounds be checked statically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from .dtypes import ScalarType, as_dtype, f32
from .ir import (BOUNDS_MODES, ELEMENTWISE_FNS, OPCODES, Assign, Const, For, If, Instr,
                 LaunchError, Program, While, eval_grid, eval_interval, expr_vars,
                 format_expr, format_path)
from .layout import Layout

__all__ = ["Diagnostic", "validate"]

DIAGNOSTIC_CODES = (
    "undefined", "redefined", "scope", "shape", "dtype", "reinterpret", "bounds",
    "arg", "grid", "capacity", "opcode",
)


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    pos: str = "<program>"
    op: Optional[str] = None

    def __str__(self):
        where = self.pos + (f" {self.op}" if self.op else "")
        return f"{where}: [{self.code}] {self.message}"

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "pos": self.pos, "op": self.op}


# static types of variables
@dataclass(frozen=True)
class _Scalar:
    kind: str  # "int", "float", "bool", "ptr", "any"
    bound: Optional[tuple] = None


@dataclass(frozen=True)
class _Global:
    dtype: ScalarType
    shape: tuple  # ints or None per dim


@dataclass(frozen=True)
class _Shared:
    dtype: ScalarType
    shape: tuple


@dataclass(frozen=True)
class _Register:
    dtype: ScalarType
    layout: Layout


_SCOPE_NAME = {_Global: "global", _Shared: "shared", _Register: "register", _Scalar: "scalar"}


class _Checker:
    def __init__(self, program: Program, args: Optional[dict], shared_capacity: int):
        self.p = program
        self.args = args
        self.capacity = shared_capacity
        self.diags: list[Diagnostic] = []
        self.scopes: list[dict] = []
        self.fixed: set[str] = set()
        self.shared_top = 0

    def emit(self, code, msg, path=(), op=None):
        self.diags.append(Diagnostic(code, msg, format_path(path), op))

    # -- scopes --------------------------------------------------------

    def lookup(self, name):
        for sc in reversed(self.scopes):
            if name in sc:
                return sc[name]
        return None

    def define(self, name, t, path, op=None):
        if self.lookup(name) is not None:
            self.emit("redefined", f"variable {name!r} is already defined", path, op)
        self.scopes[-1][name] = t

    def bounds_env(self) -> dict:
        env = {}
        for sc in self.scopes:
            for k, v in sc.items():
                if isinstance(v, _Scalar) and v.bound is not None:
                    env[k] = v.bound
        return env

    def check_expr(self, e, path, op=None, what="expression"):
        for v in sorted(expr_vars(e)):
            t = self.lookup(v)
            if t is None:
                self.emit("undefined", f"undefined variable {v!r} in {what} {format_expr(e)}", path, op)
            elif not isinstance(t, _Scalar):
                self.emit("scope", f"{_SCOPE_NAME[type(t)]} tensor {v!r} used in scalar {what}", path, op)

    def interval(self, e):
        return eval_interval(e, self.bounds_env())

    # -- driver --------------------------------------------------------

    def run(self) -> list[Diagnostic]:
        p = self.p
        top = {}
        seen = set()
        for q in p.params:
            if q.name in seen:
                self.emit("redefined", f"parameter {q.name!r} declared twice", ("params",))
            seen.add(q.name)
            if q.type == "ptr":
                top[q.name] = _Scalar("ptr")
                continue
            try:
                dt = as_dtype(q.type)
            except ValueError:
                self.emit("arg", f"parameter {q.name!r} has unknown type {q.type!r}", ("params",))
                top[q.name] = _Scalar("any")
                continue
            bound = None
            if self.args is not None and q.name in self.args:
                v = self.args[q.name]
                if isinstance(v, int) and not isinstance(v, bool):
                    bound = (v, v)
            top[q.name] = _Scalar("float" if dt.is_float else "int", bound)
        self.fixed = set(top)
        self.scopes = [top]
        for g in p.grid:
            for v in expr_vars(g):
                if p.param(v) is None:
                    self.emit("grid", f"grid extent {format_expr(g)} references non-parameter {v!r}", ("grid",))
        self.grid = None
        if self.args is not None:
            try:
                self.grid = eval_grid(p, {k: v for k, v in self.args.items()})
            except LaunchError as e:
                self.emit("grid", str(e), ("grid",))
        self.body(p.body, ())
        return self.diags

    def body(self, stmts, path):
        for k, s in enumerate(stmts):
            sp = path + (k,)
            if isinstance(s, Instr):
                self.instr(s, sp)
            elif isinstance(s, If):
                self.check_expr(s.cond, sp, what="condition")
                for branch, key in ((s.then, "then"), (s.orelse, "else")):
                    self.scopes.append({})
                    self.body(branch, sp + (key,))
                    self.scopes.pop()
            elif isinstance(s, For):
                for e in (s.start, s.stop, s.step):
                    self.check_expr(e, sp, what="loop bound")
                if isinstance(s.step, Const) and s.step.value == 0:
                    self.emit("arg", "for-loop step is zero", sp)
                lo, hi, st = self.interval(s.start), self.interval(s.stop), self.interval(s.step)
                bound = None
                if lo and hi and st and st[0] > 0:
                    bound = (lo[0], max(lo[0], hi[1] - 1))
                self.scopes.append({})
                self.define(s.var, _Scalar("int", bound), sp)
                self.fixed.add(s.var)
                self.body(s.body, sp)
                self.scopes.pop()
            elif isinstance(s, While):
                self.check_expr(s.cond, sp, what="condition")
                self.scopes.append({})
                self.body(s.body, sp)
                self.scopes.pop()
            elif isinstance(s, Assign):
                self.check_expr(s.value, sp, what="assignment")
                cur = self.lookup(s.var)
                if cur is None:
                    self.define(s.var, _Scalar("any"), sp)
                elif s.var in self.fixed:
                    self.emit("scope", f"cannot assign to parameter or loop variable {s.var!r}", sp)
                elif not isinstance(cur, _Scalar):
                    self.emit("scope", f"cannot assign a scalar to {_SCOPE_NAME[type(cur)]} tensor {s.var!r}", sp)
                else:
                    # value may change across iterations: forget any bound
                    for sc in reversed(self.scopes):
                        if s.var in sc:
                            sc[s.var] = _Scalar("any")
                            break

    # -- instructions ----------------------------------------------------

    def instr(self, s: Instr, path):
        op = s.op
        if op not in OPCODES:
            self.emit("opcode", f"unknown opcode {op!r}", path, op)
            return
        self.path, self.op = path, op
        spec = OPCODES[op]
        for k, kind in spec["args"].items():
            if not kind.endswith("?") and k not in s.args:
                self.emit("arg", f"missing argument {k!r}", path, op)
                return
        result_type = getattr(self, "_" + op)(s)
        produces = spec["produces"]
        if produces is None:
            if s.result is not None or s.out is not None:
                self.emit("arg", f"{op} produces no value", path, op)
            return
        if produces == "scalars":
            if result_type is not None:
                if len(s.results) != len(result_type):
                    self.emit("arg", f"{op} yields {len(result_type)} values, {len(s.results)} names given",
                              path, op)
                for name, t in zip(s.results, result_type):
                    self.define(name, t, path, op)
            return
        if s.out is not None:
            if produces != "register":
                self.emit("arg", f"{op} has no in-place form", path, op)
            dst = self.lookup(s.out)
            if dst is None:
                self.emit("undefined", f"out={s.out!r} is not defined", path, op)
            elif not isinstance(dst, _Register):
                self.emit("scope", f"out={s.out!r} is a {_SCOPE_NAME[type(dst)]} value, not a register tensor",
                          path, op)
            elif result_type is not None and (dst.dtype != result_type.dtype or dst.layout != result_type.layout):
                self.emit("dtype", f"out={s.out!r} is {dst.dtype.name} {dst.layout}, result would be "
                                   f"{result_type.dtype.name} {result_type.layout}", path, op)
        if s.result is not None:
            if isinstance(s.result, tuple):
                self.emit("arg", f"{op} produces a single value", path, op)
            else:
                self.define(s.result, result_type, path, op)
        elif s.out is None:
            self.emit("arg", f"{op} result is discarded (give result or out)", path, op)

    def operand(self, s, key, cls):
        name = s.args.get(key)
        if name is None:
            return None
        t = self.lookup(name)
        if t is None:
            self.emit("undefined", f"undefined variable {name!r}", self.path, self.op)
            return None
        if not isinstance(t, cls):
            self.emit("scope", f"{key}={name!r} must be a {_SCOPE_NAME[cls]} tensor, got a "
                               f"{_SCOPE_NAME[type(t)]} value", self.path, self.op)
            return None
        return t

    def exprs(self, s, key):
        es = s.args.get(key) or ()
        for e in es:
            self.check_expr(e, self.path, self.op, what=key)
        return es

    def bounds_mode(self, s):
        b = s.args.get("bounds")
        if b is not None and b not in BOUNDS_MODES:
            self.emit("arg", f"bounds mode must be one of {list(BOUNDS_MODES)}, got {b!r}", self.path, self.op)
        return b

    def check_tile(self, shape, offsets, tile_shape, what, strict=True):
        """Rank, fit and interval bounds of a tile placed at ``offsets`` in ``shape``."""
        rank, r = len(shape), len(tile_shape)
        if len(offsets) != rank:
            self.emit("shape", f"{len(offsets)} offsets for rank-{rank} {what}", self.path, self.op)
            return
        if r > rank:
            self.emit("shape", f"rank-{r} tile does not fit rank-{rank} {what}", self.path, self.op)
            return
        ext = (1,) * (rank - r) + tuple(tile_shape)
        for d, (n, e) in enumerate(zip(shape, ext)):
            if n is not None and e > n:
                self.emit("shape", f"tile extent {e} exceeds {what} extent {n} in dim {d}", self.path, self.op)
                return
        if not strict:
            return
        for d, (n, e, off) in enumerate(zip(shape, ext, offsets)):
            iv = self.interval(off)
            if iv is None:
                continue
            if iv[0] < 0 or (n is not None and iv[1] + e > n):
                self.emit("bounds", f"tile [{iv[0]}..{iv[1]}]+{e} may leave {what} extent "
                                    f"{n if n is not None else '?'} in dim {d}", self.path, self.op)

    def static_shape(self, es):
        out = []
        for e in es:
            iv = self.interval(e)
            out.append(iv[0] if iv and iv[0] == iv[1] else None)
        return tuple(out)

    def _BlockIndices(self, s):
        rank = len(self.p.grid)
        bound = [None] * rank
        if self.grid is not None:
            bound = [(0, n - 1) for n in self.grid]
        return [_Scalar("int", b) for b in bound]

    def _GlobalView(self, s):
        ptr = s.args["ptr"]
        self.check_expr(ptr, self.path, self.op, what="pointer")
        ptr_vars = [v for v in expr_vars(ptr) if isinstance(self.lookup(v), _Scalar)
                    and self.lookup(v).kind == "ptr"]
        if len(ptr_vars) != 1:
            self.emit("scope", f"ptr {format_expr(ptr)} must reference exactly one pointer parameter",
                      self.path, self.op)
        shape = self.exprs(s, "shape")
        strides = self.exprs(s, "strides")
        if strides and len(strides) != len(shape):
            self.emit("shape", f"{len(strides)} strides for a rank-{len(shape)} view", self.path, self.op)
        for n, e in zip(self.static_shape(shape), shape):
            if n is not None and n < 0:
                self.emit("shape", f"negative extent {format_expr(e)}", self.path, self.op)
        return _Global(s.args["dtype"], self.static_shape(shape))

    def _AllocateGlobal(self, s):
        shape = self.exprs(s, "shape")
        for e in shape:
            for v in expr_vars(e):
                if self.p.param(v) is None:
                    self.emit("scope", f"AllocateGlobal extent {format_expr(e)} must depend on parameters only",
                              self.path, self.op)
        return _Global(s.args["dtype"], self.static_shape(shape))

    def _AllocateShared(self, s):
        shape = s.args["shape"]
        if any(n < 1 for n in shape):
            self.emit("shape", f"shared extent must be positive, got {list(shape)}", self.path, self.op)
        nbytes = (math.prod(shape) * s.args["dtype"].bits + 7) // 8
        off = -(-self.shared_top // 16) * 16
        if off + nbytes > self.capacity:
            self.emit("capacity", f"shared allocation of {nbytes} B at offset {off} exceeds capacity "
                                  f"{self.capacity} B", self.path, self.op)
        self.shared_top = off + nbytes
        return _Shared(s.args["dtype"], tuple(shape))

    def _AllocateRegister(self, s):
        lay = s.args["layout"]
        shape = s.args.get("shape")
        if shape is not None and tuple(shape) != lay.shape:
            self.emit("shape", f"shape {list(shape)} does not match layout shape {list(lay.shape)}",
                      self.path, self.op)
        init = s.args.get("init")
        if init is not None:
            dt = s.args["dtype"]
            if dt.is_integer and (init != int(init) or not dt.min_value <= init <= dt.max_value):
                self.emit("dtype", f"init {init} is not representable in {dt.name}", self.path, self.op)
        return _Register(s.args["dtype"], lay)

    def _LoadGlobal(self, s):
        view = self.operand(s, "src", _Global)
        offsets = self.exprs(s, "offsets")
        mode = self.bounds_mode(s)
        lay = s.args["layout"]
        if view is not None:
            self.check_tile(view.shape, offsets, lay.shape, "global view", strict=mode != "zero-fill")
            return _Register(view.dtype, lay)
        return None

    def _StoreGlobal(self, s):
        reg = self.operand(s, "src", _Register)
        view = self.operand(s, "dst", _Global)
        offsets = self.exprs(s, "offsets")
        if reg is not None and view is not None:
            if reg.dtype != view.dtype:
                self.emit("dtype", f"storing {reg.dtype.name} into a {view.dtype.name} view", self.path, self.op)
            self.check_tile(view.shape, offsets, reg.layout.shape, "global view")

    def _CopyGlobalToShared(self, s):
        view = self.operand(s, "src", _Global)
        sh = self.operand(s, "dst", _Shared)
        offsets = self.exprs(s, "offsets")
        mode = self.bounds_mode(s)
        if view is not None and sh is not None:
            if view.dtype != sh.dtype:
                self.emit("dtype", f"copying {view.dtype.name} into {sh.dtype.name} shared tensor",
                          self.path, self.op)
            self.check_tile(view.shape, offsets, sh.shape, "global view", strict=mode != "zero-fill")

    def _shared_offsets(self, s, rank):
        if s.args.get("offsets") is None:
            return (Const(0),) * rank
        return self.exprs(s, "offsets")

    def _LoadShared(self, s):
        sh = self.operand(s, "src", _Shared)
        lay = s.args["layout"]
        if sh is None:
            return None
        self.check_tile(sh.shape, self._shared_offsets(s, len(sh.shape)), lay.shape, "shared tensor")
        return _Register(sh.dtype, lay)

    def _StoreShared(self, s):
        reg = self.operand(s, "src", _Register)
        sh = self.operand(s, "dst", _Shared)
        if reg is not None and sh is not None:
            if reg.dtype != sh.dtype:
                self.emit("dtype", f"storing {reg.dtype.name} into {sh.dtype.name} shared tensor",
                          self.path, self.op)
            self.check_tile(sh.shape, self._shared_offsets(s, len(sh.shape)), reg.layout.shape,
                            "shared tensor")

    def _Reinterpret(self, s):
        src = self.operand(s, "src", _Register)
        dt, lay = s.args["dtype"], s.args["layout"]
        if src is not None:
            t0, b0 = src.layout.num_threads, src.layout.num_locals * src.dtype.bits
            t1, b1 = lay.num_threads, lay.num_locals * dt.bits
            if t0 != t1 or b0 != b1:
                self.emit("reinterpret", f"cannot reinterpret {t0} threads x {b0} bits as "
                                         f"{t1} threads x {b1} bits", self.path, self.op)
        return _Register(dt, lay)

    def _Cast(self, s):
        src = self.operand(s, "src", _Register)
        return _Register(s.args["dtype"], src.layout) if src is not None else None

    def _Mma(self, s):
        a, b, c = (self.operand(s, k, _Register) for k in ("a", "b", "c"))
        if a is None or b is None or c is None:
            return None
        ok = True
        for name, t in (("a", a), ("b", b), ("c", c)):
            if t.layout.rank != 2:
                self.emit("shape", f"mma operand {name} must be 2-D, got shape {list(t.layout.shape)}",
                          self.path, self.op)
                ok = False
        for name, t in (("a", a), ("b", b)):
            if t.dtype.name not in ("f16", "bf16", "f32"):
                self.emit("dtype", f"mma operand {name} has dtype {t.dtype.name}; Cast it to f16/bf16/f32 first",
                          self.path, self.op)
        if c.dtype != f32:
            self.emit("dtype", f"mma accumulator must be f32, got {c.dtype.name}", self.path, self.op)
        lay = s.args.get("layout") or c.layout
        if ok:
            (M, K), (K2, N), (M2, N2) = a.layout.shape, b.layout.shape, c.layout.shape
            if K != K2 or M != M2 or N != N2:
                self.emit("shape", f"mma shapes {[M, K]} x {[K2, N]} + {[M2, N2]} do not conform",
                          self.path, self.op)
            elif lay.shape != (M, N):
                self.emit("shape", f"result layout shape {list(lay.shape)} != {[M, N]}", self.path, self.op)
        return _Register(f32, lay)

    def _Elementwise(self, s):
        fn = s.args["fn"]
        x = self.operand(s, "x", _Register)
        has_y = s.args.get("y") is not None
        has_s = s.args.get("scalar") is not None
        if fn not in ELEMENTWISE_FNS:
            self.emit("arg", f"unknown elementwise function {fn!r}", self.path, self.op)
        elif ELEMENTWISE_FNS[fn] == 1 and (has_y or has_s):
            self.emit("arg", f"{fn} takes a single operand", self.path, self.op)
        elif ELEMENTWISE_FNS[fn] == 2 and has_y == has_s:
            self.emit("arg", f"{fn} needs exactly one of y / scalar", self.path, self.op)
        if has_s:
            self.check_expr(s.args["scalar"], self.path, self.op, what="scalar")
        y = self.operand(s, "y", _Register) if has_y else None
        if x is None:
            return None
        if y is not None:
            xs, ys = x.layout.shape, y.layout.shape
            if len(xs) != len(ys) or any(b not in (a, 1) for a, b in zip(xs, ys)):
                self.emit("shape", f"cannot broadcast {list(ys)} to {list(xs)}", self.path, self.op)
        return _Register(s.args.get("dtype") or x.dtype, x.layout)

    def _Synchronize(self, s):
        return None

    def _Print(self, s):
        name = s.args.get("src")
        if name is not None and self.lookup(name) is None:
            self.emit("undefined", f"undefined variable {name!r}", self.path, self.op)


def validate(program: Program, args: Optional[dict] = None, *,
             shared_capacity: int = 64 * 1024) -> list[Diagnostic]:
    """Diagnostics for ``program``; an empty list means it is well-formed.

    ``args`` (scalar launch arguments) is optional. With it, the grid is
    evaluated and tile offsets get interval bounds for static range checks.
    """
    return _Checker(program, args, shared_capacity).run()
