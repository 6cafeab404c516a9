"""``tilevm`` command line: layouts, weight files, program runs and verification."""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import tensorfile
from .dtypes import DTypeError, as_dtype, f32
from .interpreter import ExecutionError, ProgramInvalid, run
from .ir import LaunchError, ProgramParseError, from_json
from .layout import LayoutError, divide, invert, parse_layout, render_grid
from .packing import PackedBuffer, PackingError, quantize
from .validate import validate
from .weights import WeightLayoutError, transform_weights


class CliError(Exception):
    pass


def _emit(args, text: str, data=None):
    if args.json:
        print(json.dumps(data if data is not None else {"output": text}, sort_keys=True))
    else:
        print(text)


# -- layout -----------------------------------------------------------------

def cmd_layout(args):
    a = parse_layout(args.expr)
    if args.action == "info":
        _emit(args, f"{a}\n{json.dumps(a.to_dict())}", {"text": str(a), **a.to_dict(),
                                                         "num_threads": a.num_threads,
                                                         "num_locals": a.num_locals})
    elif args.action in ("compose", "divide"):
        if len(args.operands) != 1:
            raise CliError(f"layout {args.action} takes two layout expressions")
        b = parse_layout(args.operands[0])
        out = a * b if args.action == "compose" else divide(a, b)
        if out is None:
            raise CliError(f"{a} is not divisible by {b}")
        _emit(args, str(out), {"text": str(out), **out.to_dict()})
    elif args.action == "eval":
        t, i = _ints(args.operands, 2, "layout eval takes a thread and a slot index")
        idx = a(t, i)
        _emit(args, str(tuple(idx)), {"index": list(idx)})
    elif args.action == "invert":
        idx = _ints(args.operands, a.rank, f"layout invert takes {a.rank} indices")
        t, i = invert(a, idx)
        _emit(args, f"(t={t}, i={i})", {"thread": t, "slot": i})
    elif args.action == "show":
        grid = render_grid(a)
        _emit(args, grid, {"grid": grid.splitlines()})


def _ints(vals, n, msg):
    if len(vals) != n:
        raise CliError(msg)
    try:
        return [int(v) for v in vals]
    except ValueError:
        raise CliError(msg) from None


# -- tensor files -----------------------------------------------------------

def _read_floats(path: Path, shape):
    blob = path.read_bytes()
    if blob[:4] == tensorfile.MAGIC:
        buf, _ = tensorfile.loads(blob)
        return buf.values().astype(np.float32)
    arr = np.frombuffer(blob, dtype="<f4")
    if shape is None:
        raise CliError(f"{path} is raw float32; give --shape")
    return arr.reshape(shape)


def _shape(text):
    if text is None:
        return None
    try:
        return tuple(int(x) for x in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}") from None


def _scales_path(path: Path) -> Path:
    return path.with_name(path.name + ".scales")


def cmd_pack(args):
    x = _read_floats(Path(args.input), args.shape)
    buf, scales = quantize(x, args.dtype, args.group_size)
    meta = {"group_size": args.group_size} if args.group_size else None
    tensorfile.save(args.output, buf, meta)
    msg = f"wrote {buf.dtype.name}{list(buf.shape)} ({buf.nbytes} B) to {args.output}"
    out = {"output": args.output, "dtype": buf.dtype.name, "shape": list(buf.shape), "nbytes": buf.nbytes}
    if args.group_size:
        sp = _scales_path(Path(args.output))
        tensorfile.save(sp, PackedBuffer.from_values(f32, scales))
        msg += f"; scales {list(scales.shape)} to {sp}"
        out["scales"] = str(sp)
    _emit(args, msg, out)


def cmd_unpack(args):
    buf, meta = tensorfile.load(args.input)
    vals = buf.values().astype(np.float32)
    sp = Path(args.scales) if args.scales else _scales_path(Path(args.input))
    if sp.exists() and len(buf.shape) == 2:
        scales, _ = tensorfile.load(sp)
        s = scales.values().astype(np.float32)
        g = buf.shape[0] // s.shape[0]
        vals = (vals * np.repeat(s, g, axis=0)).astype(np.float32)
    if args.tlus:
        tensorfile.save(args.output, PackedBuffer.from_values(f32, vals))
    else:
        Path(args.output).write_bytes(vals.astype("<f4").tobytes())
    _emit(args, f"wrote f32{list(vals.shape)} to {args.output}",
          {"output": args.output, "shape": list(vals.shape)})


def cmd_transform(args):
    buf, _ = tensorfile.load(args.input)
    out = transform_weights(buf, args.bk, args.bn)
    meta = {"transform": {"dtype": buf.dtype.name, "bk": args.bk, "bn": args.bn,
                          "shape": list(buf.shape)}}
    tensorfile.save(args.output, out, meta)
    _emit(args, f"wrote u8{list(out.shape)} ({out.shape[-1]} B per tile) to {args.output}",
          {"output": args.output, "shape": list(out.shape), "tile_bytes": out.shape[-1], **meta})


# -- programs -----------------------------------------------------------------

def _kv(items, what):
    out = {}
    for it in items or ():
        if "=" not in it:
            raise CliError(f"{what} must look like NAME=VALUE, got {it!r}")
        k, v = it.split("=", 1)
        out[k] = v
    return out


def _scalar(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    raise CliError(f"launch argument {v!r} is not a number")


def _launch(args):
    text = Path(args.program).read_text()
    prog = from_json(text)
    scalars = {k: _scalar(v) for k, v in _kv(args.arg, "--arg").items()}
    buffers = {k: tensorfile.load(v)[0] for k, v in _kv(args.buffer, "--buffer").items()}
    for k, v in _kv(args.zeros, "--zeros").items():
        dt, _, shape = v.partition(":")
        buffers[k] = PackedBuffer(as_dtype(dt), _shape(shape))
    diags = validate(prog, scalars)
    if diags:
        return prog, None, diags
    res = run(prog, scalars, buffers, check=False, bounds=args.bounds, order=args.order, seed=args.seed)
    return prog, res, []


def cmd_run(args):
    prog, res, diags = _launch(args)
    if diags:
        for d in diags:
            print(str(d), file=sys.stderr)
        if args.json:
            print(json.dumps({"diagnostics": [d.to_dict() for d in diags]}))
        return 2
    for k, v in _kv(args.output, "--output").items():
        if k not in res.buffers:
            raise CliError(f"no buffer named {k!r}")
        tensorfile.save(v, res.buffers[k])
    if args.trace:
        Path(args.trace).write_text(res.trace_jsonl())
    for r in res.trace:
        if "print" in r and not args.json:
            print(f"[block {tuple(r['block'])} {r['pos']}] {r['print']}")
    _emit(args, f"ran {prog.name} over grid {res.grid}: {len(res.trace)} instructions",
          {"program": prog.name, "grid": list(res.grid), "instructions": len(res.trace)})
    return 0


def cmd_verify(args):
    from .demo import verify
    r = verify(args.dtype, args.M, args.N, args.K, args.bm, args.bn, args.bk, seed=args.seed,
               group_size=args.group_size, use_shared=args.shared)
    _emit(args, r.summary(), {"dtype": r.dtype, "shape": list(r.shape), "passed": r.passed,
                              "max_abs_diff": r.max_abs_diff})
    return 0 if r.passed else 1


def cmd_trace(args):
    records = [json.loads(line) for line in Path(args.trace).read_text().splitlines() if line.strip()]
    if args.op:
        records = [r for r in records if r["op"] == args.op]
    ops = Counter(r["op"] for r in records)
    access = Counter(f"{r['op']}:{r['access']}" for r in records if "access" in r)
    lines = [f"{len(records)} records"]
    lines += [f"  {op:<20} {n}" for op, n in sorted(ops.items())]
    if access:
        lines.append("memory access:")
        lines += [f"  {k:<28} {n}" for k, n in sorted(access.items())]
    _emit(args, "\n".join(lines), {"records": len(records), "ops": dict(ops), "access": dict(access)})


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tilevm", description="Block-level tile program simulator.")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    sub = p.add_subparsers(dest="command", required=True)

    lp = sub.add_parser("layout", help="layout algebra queries")
    lp.add_argument("action", choices=["info", "compose", "divide", "eval", "invert", "show"])
    lp.add_argument("expr", help='layout expression, e.g. "local(2,1).spatial(8,4)"')
    lp.add_argument("operands", nargs="*", help="second layout, or integer indices")
    lp.set_defaults(fn=cmd_layout)

    pp = sub.add_parser("pack", help="quantize float32 data into a low-precision TLUS file")
    pp.add_argument("--input", required=True, help="raw little-endian float32 or a TLUS file")
    pp.add_argument("--output", required=True)
    pp.add_argument("--dtype", required=True, type=as_dtype, help="u4, i6, f6e3m2, ...")
    pp.add_argument("--shape", type=_shape, help="shape of raw input, e.g. 64,128")
    pp.add_argument("--group-size", type=int, help="rows per scale group (writes OUTPUT.scales)")
    pp.set_defaults(fn=cmd_pack)

    up = sub.add_parser("unpack", help="decode a TLUS file to float32")
    up.add_argument("--input", required=True)
    up.add_argument("--output", required=True)
    up.add_argument("--scales", help="scales sidecar (default INPUT.scales when present)")
    up.add_argument("--tlus", action="store_true", help="write a TLUS f32 file instead of raw float32")
    up.set_defaults(fn=cmd_unpack)

    tp = sub.add_parser("transform", help="re-tile weights for the kernel's register layout")
    tp.add_argument("--input", required=True)
    tp.add_argument("--output", required=True)
    tp.add_argument("--bk", type=int, required=True)
    tp.add_argument("--bn", type=int, required=True)
    tp.set_defaults(fn=cmd_transform)

    rp = sub.add_parser("run", help="validate and execute a program")
    rp.add_argument("--program", required=True, help="JSON program file")
    rp.add_argument("--arg", action="append", help="scalar launch argument NAME=VALUE")
    rp.add_argument("--buffer", action="append", help="bind pointer NAME=file.tlus")
    rp.add_argument("--zeros", action="append", help="bind pointer NAME=dtype:shape to a zero buffer")
    rp.add_argument("--output", action="append", help="write buffer NAME=file.tlus after the run")
    rp.add_argument("--trace", help="write the JSON-lines trace here")
    rp.add_argument("--bounds", choices=["strict", "zero-fill"],
                    help="default LoadGlobal bounds mode (else $TILEVM_BOUNDS, else strict)")
    rp.add_argument("--order", choices=["row-major", "shuffle"], default="row-major")
    rp.add_argument("--seed", type=int, default=0)
    rp.set_defaults(fn=cmd_run)

    vp = sub.add_parser("verify", help="check the built-in kernel against the reference matmul")
    vp.add_argument("dtype", type=as_dtype)
    vp.add_argument("M", type=int)
    vp.add_argument("N", type=int)
    vp.add_argument("K", type=int)
    vp.add_argument("--bm", type=int, default=16)
    vp.add_argument("--bn", type=int, default=8)
    vp.add_argument("--bk", type=int, default=16)
    vp.add_argument("--seed", type=int, default=0)
    vp.add_argument("--group-size", type=int, help="random per-group scales (default: all 1.0)")
    vp.add_argument("--shared", action="store_true", help="stage A tiles through shared memory")
    vp.set_defaults(fn=cmd_verify)

    trp = sub.add_parser("trace", help="summarize a JSON-lines trace")
    trp.add_argument("trace")
    trp.add_argument("--op", help="only records of this opcode")
    trp.set_defaults(fn=cmd_trace)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args) or 0
    except ProgramInvalid as e:
        for d in e.diagnostics:
            print(str(d), file=sys.stderr)
        return 2
    except (CliError, LayoutError, DTypeError, PackingError, WeightLayoutError, ProgramParseError,
            tensorfile.TensorFileError, LaunchError, ExecutionError, OSError, ValueError) as e:
        print(f"tilevm: error: {e}", file=sys.stderr)
        if args.json:
            print(json.dumps({"error": str(e), "type": type(e).__name__}))
        return 1


if __name__ == "__main__":
    sys.exit(main())
