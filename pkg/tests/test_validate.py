import numpy as np
import pytest
from hypothesis import given, strategies as st

from corpus import ARGS, MALFORMED, valid_programs
from tilevm.demo import build_matmul_program
from tilevm.interpreter import HANDLERS, ExecutionError, RegisterTensor, reinterpret
from tilevm.ir import OPCODES, Instr, Program, parse_expr
from tilevm.dtypes import as_dtype
from tilevm.layout import local, parse_layout, spatial
from tilevm.validate import validate


def test_corpus_is_large_enough():
    assert len(MALFORMED) >= 20
    assert {"shape", "scope", "reinterpret", "bounds"} <= {code for _, _, code in MALFORMED}


@pytest.mark.parametrize("name, build, code", MALFORMED, ids=[m[0] for m in MALFORMED])
def test_malformed_program_diagnosed(name, build, code):
    diags = validate(build(), ARGS)
    assert code in [d.code for d in diags], [str(d) for d in diags]


@pytest.mark.parametrize("entry", valid_programs(), ids=lambda e: e[0])
def test_valid_programs_are_clean(entry):
    _, prog, args, _ = entry
    assert validate(prog, args) == []


def test_demo_program_clean_without_args():
    assert validate(build_matmul_program("i6")) == []


def test_every_opcode_has_semantics():
    assert set(OPCODES) == set(HANDLERS)


def test_reinterpret_message_names_both_counts():
    prog = Program("p", (parse_expr("1"),), (), (
        Instr("AllocateRegister", {"dtype": as_dtype("u8"),
                                   "layout": local(4) * spatial(32)}, "a"),
        Instr("Reinterpret", {"src": "a", "dtype": as_dtype("i6"),
                              "layout": local(2, 2) * spatial(4, 8)}, "b"),
    ))
    (d,) = validate(prog)
    assert d.code == "reinterpret" and "32 bits" in d.message and "24 bits" in d.message


LAYOUTS = ["local(4).spatial(32)", "local(3).spatial(32)", "local(2, 1).column_spatial(4, 8).local(2, 1)",
           "spatial(8, 4).local(1, 2)", "local(8)", "local(6).spatial(16)", "spatial(32)"]
DTYPES = ["u8", "i6", "u4", "f6e3m2", "u1", "f16", "u3"]


@given(st.sampled_from(LAYOUTS), st.sampled_from(DTYPES), st.sampled_from(LAYOUTS), st.sampled_from(DTYPES))
def test_static_reinterpret_check_is_sound(l0, d0, l1, d1):

    src_lay, dst_lay = parse_layout(l0), parse_layout(l1)
    prog = Program("p", (parse_expr("1"),), (), (
        Instr("AllocateRegister", {"dtype": as_dtype(d0), "layout": src_lay}, "a"),
        Instr("Reinterpret", {"src": "a", "dtype": as_dtype(d1), "layout": dst_lay}, "b"),
    ))
    static_ok = validate(prog) == []
    src = RegisterTensor(as_dtype(d0), src_lay,
                         np.zeros((src_lay.num_threads, src_lay.num_locals), dtype=np.uint64))
    try:
        reinterpret(src, d1, dst_lay)
        dynamic_ok = True
    except ExecutionError as e:
        assert e.kind == "reinterpret"
        dynamic_ok = False
    assert static_ok == dynamic_ok


def test_diagnostics_are_data():
    diags = validate(MALFORMED[0][1](), ARGS)
    d = diags[0].to_dict()
    assert set(d) == {"code", "message", "pos", "op"} and d["op"] == "StoreGlobal"
