"""
A quantized matmul kernel
=========================

The built-in kernel computes ``C = A @ W`` with f16 activations and
low-precision weights, one 16x8 output tile per block, and is checked
bit for bit against a plain numpy reference.
"""

# %%
import numpy as np

from tilevm.demo import build_matmul_program, run_matmul, random_weights, verify
from tilevm.ir import to_json
from tilevm.oracle import oracle_matmul
from tilevm.validate import validate

# %%
prog = build_matmul_program("u4")
print(to_json(prog)[:400], "...")
print("diagnostics:", validate(prog, {"M": 32, "N": 64, "K": 128}))

# %%
rng = np.random.default_rng(1)
a = rng.standard_normal((32, 128)).astype(np.float16)
w = random_weights("u4", 128, 64, rng)
c, res = run_matmul(a, w)
print("grid", res.grid, "instructions", len(res.trace))
print("matches reference:", np.array_equal(c.view(np.uint16), oracle_matmul(a, w).view(np.uint16)))

# %%
ops = {}
for r in res.trace:
    ops[r["op"]] = ops.get(r["op"], 0) + 1
print(ops)

# %%
for dt in ("u1", "i6", "f6e3m2", "f8e4m3"):
    print(verify(dt, 32, 64, 128).summary())
print(verify("u3", 32, 32, 128, group_size=32, use_shared=True).summary())
