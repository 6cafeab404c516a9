import json

import pytest
from hypothesis import given, strategies as st

from tilevm.demo import build_matmul_program
from tilevm.ir import (BinOp, Call, Const, LaunchError, ProgramParseError, Var, eval_expr, eval_grid,
                       eval_interval, format_expr, from_dict, from_json, parse_expr, to_dict, to_json)

NAMES = st.sampled_from(["M", "N", "K", "bi", "k"])


def exprs():
    leaf = st.one_of(st.integers(-20, 200).map(Const), NAMES.map(Var))
    ops = st.sampled_from(["+", "-", "*", "/", "%", "<", "==", "and", "or"])
    return st.recursive(leaf, lambda c: st.one_of(
        st.tuples(ops, c, c).map(lambda x: BinOp(*x)),
        st.tuples(st.sampled_from(["cdiv", "min", "max"]), c, c).map(lambda x: Call(x[0], (x[1], x[2]))),
    ), max_leaves=8)


@given(exprs())
def test_expr_text_round_trip(e):
    assert parse_expr(format_expr(e)) == e


def test_floor_division_and_calls():
    assert parse_expr("M / 128") == BinOp("/", Var("M"), Const(128))
    env = {"M": 300, "K": 7}
    assert eval_expr(parse_expr("M / 128"), env) == 2
    assert eval_expr(parse_expr("cdiv(M, 128)"), env) == 3
    assert eval_expr(parse_expr("-K / 2"), env) == -4
    assert eval_expr(parse_expr("min(M, K) + max(1, 2) * 3"), env) == 13
    assert eval_expr(parse_expr("K < 8 and not M == 300"), env) is False


def test_interval():
    env = {"k": (0, 7), "M": 64}
    assert eval_interval(parse_expr("k * 16"), env) == (0, 112)
    assert eval_interval(parse_expr("M / 16 - 1"), env) == (3, 3)
    assert eval_interval(parse_expr("k % 4"), env) == (0, 3)
    assert eval_interval(parse_expr("x + 1"), env) is None


def test_bad_expressions():
    for bad in ["M ** 2", "f(x)", "M +", "cdiv(M)", "[1]"]:
        with pytest.raises(ValueError):
            parse_expr(bad)


@pytest.mark.parametrize("kw", [{}, {"group_size": 32}, {"use_shared": True}])
def test_program_round_trip(kw):
    p = build_matmul_program("i6", **kw)
    text = to_json(p)
    assert from_json(text) == p
    assert to_json(from_json(text)) == text


def test_grid_angle_bracket_form():
    d = to_dict(build_matmul_program("i6"))
    d["grid"] = "<M / 128, N / 128>"
    p = from_dict(d)
    assert p.grid == (parse_expr("M / 128"), parse_expr("N / 128"))
    assert eval_grid(p, {"M": 256, "N": 128, "K": 1}) == (2, 1)


def test_eval_grid_errors():
    d = to_dict(build_matmul_program("i6"))
    d["grid"] = ["1"]
    assert eval_grid(from_dict(d), {}) == (1,)
    d["grid"] = ["M % 0"]
    with pytest.raises(LaunchError, match="division by zero"):
        eval_grid(from_dict(d), {"M": 4})
    d["grid"] = ["M - 4"]
    with pytest.raises(LaunchError, match="positive"):
        eval_grid(from_dict(d), {"M": 4})


def test_unknown_opcode_reports_position():
    d = to_dict(build_matmul_program("i6"))
    d["body"][2]["op"] = "LoadGlobl"
    text = json.dumps(d, indent=2)
    with pytest.raises(ProgramParseError) as ei:
        from_json(text)
    err = ei.value
    assert "LoadGlobl" in str(err) and err.opcode == "LoadGlobl"
    assert text.splitlines()[err.line - 1].strip().startswith('"op": "LoadGlobl"')
    assert err.path == "2"


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d["body"][1]["args"].pop("dtype"), "missing argument 'dtype'"),
    (lambda d: d["body"][1]["args"].update(dtype="q7"), "cannot parse dtype"),
    (lambda d: d["body"][1]["args"].update(colour="red"), "unknown arguments"),
    (lambda d: d["body"][1].update(extra=1), "unexpected fields"),
    (lambda d: d.pop("grid"), "missing field 'grid'"),
    (lambda d: d["body"].append({"stmt": "goto"}), "unknown statement kind"),
])
def test_parse_errors(mutate, msg):
    d = to_dict(build_matmul_program("i6"))
    mutate(d)
    with pytest.raises(ProgramParseError, match=msg):
        from_json(json.dumps(d, indent=2))


def test_invalid_json_has_line():
    with pytest.raises(ProgramParseError) as ei:
        from_json('{\n  "name": 1,\n  oops\n}')
    assert ei.value.line == 3
