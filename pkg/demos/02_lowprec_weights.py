"""
Sub-byte weights
================

Weights of any width from 1 to 8 bits are packed with no gaps, so a 6-bit
value may straddle two bytes. A kernel never touches those bits one by one.
It loads whole bytes and reinterprets them in registers.
"""

# %%
import numpy as np

from tilevm.dtypes import decode, parse_dtype
from tilevm.interpreter import RegisterTensor, reinterpret
from tilevm.packing import PackedBuffer, quantize
from tilevm.weights import compatible_u8_layout, transform_weights, weight_tile_layout

# %%
f6 = parse_dtype("f6e3m2")
print(f6, "max", f6.max_value, "smallest step", decode(f6, 1))

# %%
rng = np.random.default_rng(0)
x = rng.standard_normal((16, 8)).astype(np.float32)
q, scales = quantize(x, "i6", group_size=8)
print(q.dtype, q.shape, q.nbytes, "bytes")
print("worst error", np.abs(q.values() * np.repeat(scales, 8, axis=0) - x).max())

# %%
# Each of the 32 threads owns 4 six-bit weights, which is exactly 3 bytes.
tile = weight_tile_layout(16, 8, 6)
u8 = compatible_u8_layout(3, 32)
print(tile, "<->", u8)

# %%
# Re-tile offline so that a contiguous byte load lands the right bits in each thread.
t = transform_weights(q, 16, 8)
raw = np.frombuffer(bytes(t.data), dtype=np.uint8)
regs = RegisterTensor.from_logical("u8", u8, raw)
low = reinterpret(regs, "i6", tile)
print(np.array_equal(low.to_logical(), q.values()))

# %%
# The same bits seen either way.
print("thread 0 bits", bin(regs.thread_bits(0)), bin(low.thread_bits(0)))
print(PackedBuffer.from_values("u3", [5, 3, 6, 1]).data.hex())
