"""Thread-block-level program IR and its JSON exchange format.

A program has a name, a grid shape (integer expressions over its parameters),
typed parameters and a body of structured statements. Instructions operate on
a whole thread block. Scalar expressions are written in Python-like infix
text; ``/`` is floor division on integers.
"""

from __future__ import annotations

import ast
import json
import re
from dataclasses import dataclass, field
from typing import Any, Optional, Union

from .dtypes import DTypeError, parse_dtype
from .layout import Layout, LayoutError, parse_layout

__all__ = [
    "Expr", "Const", "Var", "BinOp", "UnaryOp", "Call",
    "parse_expr", "format_expr", "eval_expr",
    "Param", "Instr", "If", "For", "While", "Assign", "Program",
    "OPCODES", "ProgramParseError", "EvalError",
    "to_json", "from_json", "to_dict", "from_dict", "eval_grid", "walk",
]


class EvalError(ArithmeticError):
    pass


# -- expressions ------------------------------------------------------------

@dataclass(frozen=True)
class Const:
    value: Union[int, float, bool]


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class BinOp:
    op: str
    lhs: "Expr"
    rhs: "Expr"


@dataclass(frozen=True)
class UnaryOp:
    op: str
    operand: "Expr"


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple


Expr = Union[Const, Var, BinOp, UnaryOp, Call]

_BINOPS = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/", ast.FloorDiv: "/",
           ast.Mod: "%"}
_CMPOPS = {ast.Lt: "<", ast.LtE: "<=", ast.Gt: ">", ast.GtE: ">=", ast.Eq: "==", ast.NotEq: "!="}
_CALLS = {"cdiv": 2, "min": 2, "max": 2}
_PREC = {"or": 1, "and": 2, "not": 3, "<": 4, "<=": 4, ">": 4, ">=": 4, "==": 4, "!=": 4,
         "+": 5, "-": 5, "*": 6, "/": 6, "%": 6, "neg": 7}


def parse_expr(text) -> Expr:
    """Parse infix text (or a bare number) into an expression tree."""
    if isinstance(text, bool) or isinstance(text, (int, float)):
        return Const(text)
    if not isinstance(text, str):
        raise ValueError(f"expected an expression string, got {text!r}")
    try:
        tree = ast.parse(text.strip(), mode="eval").body
    except SyntaxError as e:
        raise ValueError(f"bad expression {text!r}: {e.msg}") from None
    return _from_ast(tree, text)


def _from_ast(node, text) -> Expr:
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float, bool)):
        return Const(node.value)
    if isinstance(node, ast.Name):
        if node.id in ("True", "False"):
            return Const(node.id == "True")
        return Var(node.id)
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return BinOp(_BINOPS[type(node.op)], _from_ast(node.left, text), _from_ast(node.right, text))
    if isinstance(node, ast.UnaryOp):
        inner = _from_ast(node.operand, text)
        if isinstance(node.op, ast.USub):
            if isinstance(inner, Const) and not isinstance(inner.value, bool):
                return Const(-inner.value)
            return UnaryOp("neg", inner)
        if isinstance(node.op, ast.UAdd):
            return inner
        if isinstance(node.op, ast.Not):
            return UnaryOp("not", inner)
    if isinstance(node, ast.BoolOp):
        op = "and" if isinstance(node.op, ast.And) else "or"
        vals = [_from_ast(v, text) for v in node.values]
        out = vals[0]
        for v in vals[1:]:
            out = BinOp(op, out, v)
        return out
    if isinstance(node, ast.Compare) and all(type(o) in _CMPOPS for o in node.ops):
        parts = []
        left = _from_ast(node.left, text)
        for o, c in zip(node.ops, node.comparators):
            right = _from_ast(c, text)
            parts.append(BinOp(_CMPOPS[type(o)], left, right))
            left = right
        out = parts[0]
        for p in parts[1:]:
            out = BinOp("and", out, p)
        return out
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _CALLS:
        if len(node.args) != _CALLS[node.func.id] or node.keywords:
            raise ValueError(f"{node.func.id} takes {_CALLS[node.func.id]} arguments in {text!r}")
        return Call(node.func.id, tuple(_from_ast(a, text) for a in node.args))
    raise ValueError(f"unsupported construct {ast.dump(node)[:40]}... in expression {text!r}")


def format_expr(e: Expr) -> str:
    if isinstance(e, Const):
        return repr(e.value) if not isinstance(e.value, bool) else str(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.fn}({', '.join(format_expr(a) for a in e.args)})"
    if isinstance(e, UnaryOp):
        inner = format_expr(e.operand)
        if _prec(e.operand) < _PREC[e.op]:
            inner = f"({inner})"
        return f"-{inner}" if e.op == "neg" else f"not {inner}"
    p = _PREC[e.op]
    lhs, rhs = format_expr(e.lhs), format_expr(e.rhs)
    if _prec(e.lhs) < p or (p == 4 and _prec(e.lhs) == 4):
        lhs = f"({lhs})"
    if _prec(e.rhs) <= p:
        rhs = f"({rhs})"
    return f"{lhs} {e.op} {rhs}"


def _prec(e: Expr) -> int:
    if isinstance(e, BinOp):
        return _PREC[e.op]
    if isinstance(e, UnaryOp):
        return _PREC[e.op]
    if isinstance(e, Const) and not isinstance(e.value, bool) and e.value < 0:
        return _PREC["neg"]
    return 99


def expr_vars(e: Expr) -> set[str]:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, BinOp):
        return expr_vars(e.lhs) | expr_vars(e.rhs)
    if isinstance(e, UnaryOp):
        return expr_vars(e.operand)
    if isinstance(e, Call):
        out = set()
        for a in e.args:
            out |= expr_vars(a)
        return out
    return set()


def eval_expr(e: Expr, env: dict) -> Any:
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            return env[e.name]
        except KeyError:
            raise EvalError(f"undefined variable {e.name!r}") from None
    if isinstance(e, UnaryOp):
        v = eval_expr(e.operand, env)
        return -v if e.op == "neg" else (not v)
    if isinstance(e, Call):
        a, b = (eval_expr(x, env) for x in e.args)
        if e.fn == "cdiv":
            if b == 0:
                raise EvalError(f"division by zero in {format_expr(e)}")
            return -(-a // b)
        return min(a, b) if e.fn == "min" else max(a, b)
    if e.op == "and":
        return bool(eval_expr(e.lhs, env)) and bool(eval_expr(e.rhs, env))
    if e.op == "or":
        return bool(eval_expr(e.lhs, env)) or bool(eval_expr(e.rhs, env))
    a, b = eval_expr(e.lhs, env), eval_expr(e.rhs, env)
    if e.op in ("/", "%") and b == 0:
        raise EvalError(f"division by zero in {format_expr(e)}")
    if e.op == "/":
        if isinstance(a, int) and isinstance(b, int):
            return a // b
        return a / b
    return _ARITH[e.op](a, b)


_ARITH = {
    "+": lambda a, b: a + b, "-": lambda a, b: a - b, "*": lambda a, b: a * b,
    "%": lambda a, b: a % b, "<": lambda a, b: a < b, "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b, ">=": lambda a, b: a >= b, "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
}


def eval_interval(e: Expr, env: dict) -> Optional[tuple[int, int]]:
    """Conservative integer range of ``e`` given ranges in ``env``; ``None`` if unknown."""
    if isinstance(e, Const):
        return (e.value, e.value) if isinstance(e.value, int) and not isinstance(e.value, bool) else None
    if isinstance(e, Var):
        r = env.get(e.name)
        if isinstance(r, tuple):
            return r
        if isinstance(r, int) and not isinstance(r, bool):
            return (r, r)
        return None
    if isinstance(e, UnaryOp):
        r = eval_interval(e.operand, env) if e.op == "neg" else None
        return (-r[1], -r[0]) if r else None
    if isinstance(e, Call):
        a, b = (eval_interval(x, env) for x in e.args)
        if a is None or b is None:
            return None
        if e.fn == "min":
            return (min(a[0], b[0]), min(a[1], b[1]))
        if e.fn == "max":
            return (max(a[0], b[0]), max(a[1], b[1]))
        if b[0] == b[1] and b[0] > 0:
            c = b[0]
            return (-(-a[0] // c), -(-a[1] // c))
        return None
    a, b = eval_interval(e.lhs, env), eval_interval(e.rhs, env)
    if a is None or b is None:
        return None
    if e.op == "+":
        return (a[0] + b[0], a[1] + b[1])
    if e.op == "-":
        return (a[0] - b[1], a[1] - b[0])
    if e.op == "*":
        prods = [x * y for x in a for y in b]
        return (min(prods), max(prods))
    if e.op in ("/", "%") and b[0] == b[1] and b[0] > 0:
        c = b[0]
        if e.op == "/":
            return (a[0] // c, a[1] // c)
        if a[0] == a[1]:
            return (a[0] % c, a[0] % c)
        return (0, c - 1)
    return None


# -- program structure ------------------------------------------------------

@dataclass(frozen=True)
class Param:
    name: str
    type: str  # "ptr" or a scalar dtype name


@dataclass(frozen=True)
class Instr:
    op: str
    args: dict = field(default_factory=dict)
    result: Optional[Union[str, tuple]] = None
    out: Optional[str] = None

    @property
    def results(self) -> tuple:
        if self.result is None:
            return ()
        return self.result if isinstance(self.result, tuple) else (self.result,)


@dataclass(frozen=True)
class If:
    cond: Expr
    then: tuple
    orelse: tuple = ()


@dataclass(frozen=True)
class For:
    var: str
    start: Expr
    stop: Expr
    step: Expr
    body: tuple


@dataclass(frozen=True)
class While:
    cond: Expr
    body: tuple


@dataclass(frozen=True)
class Assign:
    var: str
    value: Expr


Stmt = Union[Instr, If, For, While, Assign]


@dataclass(frozen=True)
class Program:
    name: str
    grid: tuple
    params: tuple
    body: tuple

    def param(self, name: str) -> Optional[Param]:
        return next((p for p in self.params if p.name == name), None)


def walk(body, path=()):
    """Yield ``(path, stmt)`` for every statement, depth first, in program order."""
    for k, s in enumerate(body):
        p = path + (k,)
        yield p, s
        if isinstance(s, If):
            yield from walk(s.then, p + ("then",))
            yield from walk(s.orelse, p + ("else",))
        elif isinstance(s, (For, While)):
            yield from walk(s.body, p)


def format_path(path) -> str:
    return ".".join(str(x) for x in path) if path else "<program>"


# -- opcode table -----------------------------------------------------------
# kinds: expr, exprs, ints, var, dtype, layout, str, bool, number; "?" marks optional

OPCODES: dict[str, dict] = {
    "BlockIndices": {"args": {}, "produces": "scalars"},
    "GlobalView": {"args": {"ptr": "expr", "dtype": "dtype", "shape": "exprs", "strides": "exprs?"},
                   "produces": "global"},
    "AllocateGlobal": {"args": {"dtype": "dtype", "shape": "exprs", "zero": "bool?"},
                       "produces": "global"},
    "AllocateShared": {"args": {"dtype": "dtype", "shape": "ints"}, "produces": "shared"},
    "AllocateRegister": {"args": {"dtype": "dtype", "layout": "layout", "shape": "ints?",
                                  "init": "number?"}, "produces": "register"},
    "LoadGlobal": {"args": {"src": "var", "offsets": "exprs", "layout": "layout", "bounds": "str?"},
                   "produces": "register"},
    "StoreGlobal": {"args": {"src": "var", "dst": "var", "offsets": "exprs"}, "produces": None},
    "CopyGlobalToShared": {"args": {"src": "var", "dst": "var", "offsets": "exprs", "bounds": "str?"},
                           "produces": None},
    "LoadShared": {"args": {"src": "var", "layout": "layout", "offsets": "exprs?"},
                   "produces": "register"},
    "StoreShared": {"args": {"src": "var", "dst": "var", "offsets": "exprs?"}, "produces": None},
    "Reinterpret": {"args": {"src": "var", "dtype": "dtype", "layout": "layout"},
                    "produces": "register"},
    "Cast": {"args": {"src": "var", "dtype": "dtype"}, "produces": "register"},
    "Mma": {"args": {"a": "var", "b": "var", "c": "var", "layout": "layout?"},
            "produces": "register"},
    "Elementwise": {"args": {"fn": "str", "x": "var", "y": "var?", "scalar": "expr?",
                             "dtype": "dtype?"}, "produces": "register"},
    "Synchronize": {"args": {}, "produces": None},
    "Print": {"args": {"src": "var?", "message": "str?"}, "produces": None},
}

ELEMENTWISE_FNS = {"add": 2, "sub": 2, "mul": 2, "div": 2, "max": 2, "min": 2, "neg": 1, "abs": 1}
BOUNDS_MODES = ("strict", "zero-fill")


class ProgramParseError(ValueError):
    def __init__(self, message, line=None, col=None, opcode=None, path=None):
        self.line, self.col, self.opcode, self.path = line, col, opcode, path
        where = []
        if line is not None:
            where.append(f"line {line}, column {col}")
        if path:
            where.append(f"at {path}")
        if opcode:
            where.append(f"in {opcode}")
        super().__init__(message + (f" ({'; '.join(where)})" if where else ""))


# -- JSON encoding ----------------------------------------------------------

def _enc_arg(kind: str, v):
    kind = kind.rstrip("?")
    if kind == "expr":
        return format_expr(v)
    if kind == "exprs":
        return [format_expr(x) for x in v]
    if kind == "dtype":
        return v.name
    if kind == "layout":
        try:
            return v.to_text()
        except LayoutError:
            return v.to_dict()
    if kind == "ints":
        return list(v)
    return v


def to_dict(p: Program) -> dict:
    return {
        "name": p.name,
        "grid": [format_expr(g) for g in p.grid],
        "params": [{"name": q.name, "type": q.type} for q in p.params],
        "body": _enc_body(p.body),
    }


def _enc_body(body) -> list:
    out = []
    for s in body:
        if isinstance(s, Instr):
            spec = OPCODES[s.op]["args"]
            d: dict = {"op": s.op}
            if s.result is not None:
                d["result"] = list(s.result) if isinstance(s.result, tuple) else s.result
            if s.args:
                d["args"] = {k: _enc_arg(spec[k], v) for k, v in s.args.items()}
            if s.out is not None:
                d["out"] = s.out
            out.append(d)
        elif isinstance(s, If):
            d = {"stmt": "if", "cond": format_expr(s.cond), "then": _enc_body(s.then)}
            if s.orelse:
                d["else"] = _enc_body(s.orelse)
            out.append(d)
        elif isinstance(s, For):
            out.append({"stmt": "for", "var": s.var, "start": format_expr(s.start),
                        "stop": format_expr(s.stop), "step": format_expr(s.step),
                        "body": _enc_body(s.body)})
        elif isinstance(s, While):
            out.append({"stmt": "while", "cond": format_expr(s.cond), "body": _enc_body(s.body)})
        elif isinstance(s, Assign):
            out.append({"stmt": "assign", "var": s.var, "value": format_expr(s.value)})
        else:
            raise TypeError(f"not a statement: {s!r}")
    return out


def to_json(p: Program, indent: int = 2) -> str:
    return json.dumps(to_dict(p), indent=indent)


class _Decoder:
    def __init__(self, text: Optional[str]):
        self.text = text
        self.seen: dict[str, int] = {}

    def fail(self, msg, path, opcode=None, occurrence=None):
        line = col = None
        if self.text is not None and opcode is not None:
            hits = list(re.finditer(r'"op"\s*:\s*"' + re.escape(opcode) + r'"', self.text))
            if hits:
                m = hits[min(occurrence or 0, len(hits) - 1)]
                line = self.text.count("\n", 0, m.start()) + 1
                col = m.start() - self.text.rfind("\n", 0, m.start())
        raise ProgramParseError(msg, line, col, opcode, format_path(path))

    def expr(self, v, path, opcode=None, occ=None):
        try:
            return parse_expr(v)
        except ValueError as e:
            self.fail(str(e), path, opcode, occ)

    def arg(self, kind, v, path, opcode, occ):
        kind = kind.rstrip("?")
        try:
            if kind == "expr":
                return parse_expr(v)
            if kind == "exprs":
                if not isinstance(v, list):
                    raise ValueError("expected a list of expressions")
                return tuple(parse_expr(x) for x in v)
            if kind == "ints":
                if not isinstance(v, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
                    raise ValueError("expected a list of integers")
                return tuple(v)
            if kind == "dtype":
                return parse_dtype(v)
            if kind == "layout":
                return Layout.from_dict(v) if isinstance(v, dict) else parse_layout(v)
            if kind == "var":
                if not isinstance(v, str) or not v.isidentifier():
                    raise ValueError(f"expected a variable name, got {v!r}")
                return v
            if kind == "str":
                if not isinstance(v, str):
                    raise ValueError(f"expected a string, got {v!r}")
                return v
            if kind == "bool":
                if not isinstance(v, bool):
                    raise ValueError(f"expected true/false, got {v!r}")
                return v
            if kind == "number":
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ValueError(f"expected a number, got {v!r}")
                return v
        except (ValueError, DTypeError, LayoutError, TypeError) as e:
            self.fail(str(e), path, opcode, occ)
        raise AssertionError(kind)

    def body(self, items, path) -> tuple:
        if not isinstance(items, list):
            self.fail("statement body must be a list", path)
        return tuple(self.stmt(s, path + (k,)) for k, s in enumerate(items))

    def stmt(self, d, path):
        if not isinstance(d, dict):
            self.fail(f"statement must be an object, got {type(d).__name__}", path)
        if "op" in d:
            return self.instr(d, path)
        kind = d.get("stmt")
        try:
            if kind == "if":
                return If(self.expr(d["cond"], path), self.body(d["then"], path + ("then",)),
                          self.body(d.get("else", []), path + ("else",)))
            if kind == "for":
                return For(d["var"], self.expr(d.get("start", 0), path), self.expr(d["stop"], path),
                           self.expr(d.get("step", 1), path), self.body(d["body"], path))
            if kind == "while":
                return While(self.expr(d["cond"], path), self.body(d["body"], path))
            if kind == "assign":
                return Assign(d["var"], self.expr(d["value"], path))
        except KeyError as e:
            self.fail(f"{kind} statement missing field {e}", path)
        self.fail(f"unknown statement kind {kind!r}", path)

    def instr(self, d, path):
        op = d["op"]
        occ = self.seen.get(op, 0) if isinstance(op, str) else 0
        if isinstance(op, str):
            self.seen[op] = occ + 1
        if op not in OPCODES:
            self.fail(f"unknown opcode {op!r}", path, op if isinstance(op, str) else None, occ)
        extra = set(d) - {"op", "args", "result", "out"}
        if extra:
            self.fail(f"unexpected fields {sorted(extra)}", path, op, occ)
        spec = OPCODES[op]["args"]
        raw = d.get("args", {})
        if not isinstance(raw, dict):
            self.fail("args must be an object", path, op, occ)
        unknown = set(raw) - set(spec)
        if unknown:
            self.fail(f"unknown arguments {sorted(unknown)}", path, op, occ)
        args = {}
        for k, kind in spec.items():
            if k in raw:
                args[k] = self.arg(kind, raw[k], path, op, occ)
            elif not kind.endswith("?"):
                self.fail(f"missing argument {k!r}", path, op, occ)
        result = d.get("result")
        if isinstance(result, list):
            result = tuple(result)
        return Instr(op, args, result, d.get("out"))


def from_dict(d: dict, text: Optional[str] = None) -> Program:
    dec = _Decoder(text)
    if not isinstance(d, dict):
        dec.fail("program must be a JSON object", ())
    for key in ("name", "grid", "params", "body"):
        if key not in d:
            dec.fail(f"program missing field {key!r}", ())
    grid = d["grid"]
    if isinstance(grid, str):
        g = grid.strip()
        if g.startswith("<") and g.endswith(">"):
            g = g[1:-1]
        grid = [x for x in _split_top(g)]
    params = []
    for q in d["params"]:
        if not isinstance(q, dict) or "name" not in q or "type" not in q:
            dec.fail(f"bad parameter entry {q!r}", ("params",))
        params.append(Param(q["name"], q["type"]))
    return Program(d["name"], tuple(dec.expr(x, ("grid",)) for x in grid), tuple(params),
                   dec.body(d["body"], ()))


def _split_top(text: str) -> list[str]:
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
            continue
        depth += ch == "("
        depth -= ch == ")"
        cur += ch
    if cur.strip():
        parts.append(cur)
    return parts


def from_json(text: str) -> Program:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProgramParseError(f"invalid JSON: {e.msg}", e.lineno, e.colno) from None
    return from_dict(d, text)


def eval_grid(p: Program, args: dict) -> tuple[int, ...]:
    """Grid extents for launch arguments ``args``; each must be a positive integer."""
    out = []
    for g in p.grid:
        try:
            v = eval_expr(g, args)
        except EvalError as e:
            raise LaunchError(f"cannot evaluate grid extent {format_expr(g)}: {e}") from None
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise LaunchError(f"grid extent {format_expr(g)} = {v!r} is not a positive integer")
        out.append(v)
    return tuple(out)


class LaunchError(RuntimeError):
    pass
