"""Scalar data types: standard widths plus arbitrary 1-8 bit integers and floats.

Floats use an IEEE-style encoding with bias ``2**(E-1) - 1`` and subnormals.
Floats of 8 bits or fewer have no Inf/NaN codes (the all-ones exponent is an
ordinary binade) and saturate on overflow; wider floats follow IEEE 754.
Integer encodes round half-to-even and saturate.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "ScalarType",
    "DTypeError",
    "parse_dtype",
    "uint",
    "sint",
    "float_type",
    "f16",
    "bf16",
    "f32",
    "f64",
    "u8",
    "i32",
    "decode",
    "encode",
    "decode_array",
    "encode_array",
    "all_lowprec_types",
]

UINT, INT, FLOAT = "uint", "int", "float"


class DTypeError(ValueError):
    pass


@dataclass(frozen=True)
class ScalarType:
    kind: str
    bits: int
    exponent_bits: int = 0
    mantissa_bits: int = 0

    def __post_init__(self):
        if self.kind not in (UINT, INT, FLOAT):
            raise DTypeError(f"unknown dtype kind {self.kind!r}")
        if not 1 <= self.bits <= 64:
            raise DTypeError(f"bit width must be in 1..64, got {self.bits}")
        if self.kind == INT and self.bits < 2:
            raise DTypeError("signed integers need at least 2 bits")
        if self.kind == FLOAT:
            if self.bits < 3:
                raise DTypeError("floats need at least 3 bits")
            if self.exponent_bits < 1 or self.mantissa_bits < 1:
                raise DTypeError("floats need at least one exponent and one mantissa bit")
            if 1 + self.exponent_bits + self.mantissa_bits != self.bits:
                raise DTypeError(
                    f"1 + {self.exponent_bits} + {self.mantissa_bits} != {self.bits} bits")
            if self.exponent_bits > 11:
                raise DTypeError("exponent fields wider than 11 bits are not supported")
        elif self.exponent_bits or self.mantissa_bits:
            raise DTypeError("integer types carry no exponent/mantissa split")

    @property
    def name(self) -> str:
        if self.kind == UINT:
            return f"u{self.bits}"
        if self.kind == INT:
            return f"i{self.bits}"
        std = _STANDARD_FLOAT_NAMES.get((self.bits, self.exponent_bits))
        if std:
            return std
        return f"f{self.bits}e{self.exponent_bits}m{self.mantissa_bits}"

    def __str__(self) -> str:
        return self.name

    @property
    def is_float(self) -> bool:
        return self.kind == FLOAT

    @property
    def is_integer(self) -> bool:
        return self.kind != FLOAT

    @property
    def is_signed(self) -> bool:
        return self.kind != UINT

    @property
    def is_standard(self) -> bool:
        """Hardware-native widths (8/16/32/64-bit ints, f16/bf16/f32/f64)."""
        if self.kind == FLOAT:
            return (self.bits, self.exponent_bits) in _STANDARD_FLOAT_NAMES
        return self.bits in (8, 16, 32, 64)

    @property
    def has_inf_nan(self) -> bool:
        return self.kind == FLOAT and self.bits > 8

    @property
    def bias(self) -> int:
        return (1 << (self.exponent_bits - 1)) - 1

    @property
    def code_mask(self) -> int:
        return (1 << self.bits) - 1

    @property
    def min_value(self):
        if self.kind == UINT:
            return 0
        if self.kind == INT:
            return -(1 << (self.bits - 1))
        return -self.max_value

    @property
    def max_value(self):
        if self.kind == UINT:
            return (1 << self.bits) - 1
        if self.kind == INT:
            return (1 << (self.bits - 1)) - 1
        top = (1 << self.exponent_bits) - (2 if self.has_inf_nan else 1)
        frac = 2.0 - 2.0 ** (-self.mantissa_bits)
        return frac * 2.0 ** (top - self.bias)

    def numpy_dtype(self):
        """Exact numpy equivalent for standard types, else ``None``."""
        return _NUMPY.get(self.name)

    def spec(self) -> dict:
        return {"kind": self.kind, "bits": self.bits,
                "exponent_bits": self.exponent_bits, "mantissa_bits": self.mantissa_bits}


_STANDARD_FLOAT_NAMES = {(16, 5): "f16", (16, 8): "bf16", (32, 8): "f32", (64, 11): "f64"}
_NUMPY = {
    "u8": np.uint8, "u16": np.uint16, "u32": np.uint32, "u64": np.uint64,
    "i8": np.int8, "i16": np.int16, "i32": np.int32, "i64": np.int64,
    "f16": np.float16, "f32": np.float32, "f64": np.float64,
}


def uint(bits: int) -> ScalarType:
    return ScalarType(UINT, bits)


def sint(bits: int) -> ScalarType:
    return ScalarType(INT, bits)


def float_type(exponent_bits: int, mantissa_bits: int) -> ScalarType:
    return ScalarType(FLOAT, 1 + exponent_bits + mantissa_bits, exponent_bits, mantissa_bits)


f16 = float_type(5, 10)
bf16 = float_type(8, 7)
f32 = float_type(8, 23)
f64 = float_type(11, 52)
u8 = uint(8)
i32 = sint(32)

_ALIASES = {"f16": f16, "bf16": bf16, "f32": f32, "f64": f64,
            "float16": f16, "bfloat16": bf16, "float32": f32, "float64": f64}
_DTYPE_RE = re.compile(r"^(?:(u|i)(\d+)|f(\d+)e(\d+)m(\d+))$")


@lru_cache(maxsize=None)
def parse_dtype(text: str) -> ScalarType:
    """Parse ``u4``, ``i6``, ``f6e3m2``, ``f16``, ``bf16``, ``f32`` ..."""
    text = text.strip().lower()
    if text in _ALIASES:
        return _ALIASES[text]
    m = _DTYPE_RE.match(text)
    if not m:
        raise DTypeError(f"cannot parse dtype {text!r}")
    if m.group(1):
        kind = UINT if m.group(1) == "u" else INT
        return ScalarType(kind, int(m.group(2)))
    bits, e, mt = int(m.group(3)), int(m.group(4)), int(m.group(5))
    return ScalarType(FLOAT, bits, e, mt)


def as_dtype(x) -> ScalarType:
    if isinstance(x, ScalarType):
        return x
    return parse_dtype(str(x))


def all_lowprec_types() -> list[ScalarType]:
    """Every 1-8 bit type: u1..u8, i2..i8, and all floats with E, M >= 1."""
    out = [uint(b) for b in range(1, 9)] + [sint(b) for b in range(2, 9)]
    for b in range(3, 9):
        for e in range(1, b - 1):
            out.append(float_type(e, b - 1 - e))
    return out


# -- scalar codecs ----------------------------------------------------------

def _check_code(t: ScalarType, raw: int):
    if not 0 <= raw <= t.code_mask:
        raise DTypeError(f"code {raw:#x} does not fit in {t.bits} bits ({t.name})")


def decode(t: ScalarType, raw: int):
    """Value of bit pattern ``raw``: ``int`` for integer types, ``float`` otherwise."""
    raw = int(raw)
    _check_code(t, raw)
    if t.kind == UINT:
        return raw
    if t.kind == INT:
        return raw - (1 << t.bits) if raw >> (t.bits - 1) else raw
    return float(decode_array(t, np.array([raw], dtype=np.uint64))[0])


def encode(t: ScalarType, v) -> int:
    """Nearest code for ``v``; ties to even, saturating where there is no Inf."""
    if t.kind != FLOAT and isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return int(min(max(int(v), t.min_value), t.max_value)) & t.code_mask
    return int(encode_array(t, np.array([v], dtype=np.float64))[0])


# -- vectorized codecs ------------------------------------------------------

def decode_array(t: ScalarType, codes: np.ndarray) -> np.ndarray:
    """Decode codes to ``int64`` (integer types) or ``float64`` (floats)."""
    codes = np.asarray(codes, dtype=np.uint64)
    if t.kind == UINT:
        if t.bits == 64:
            return codes.copy()
        return codes.astype(np.int64)
    if t.kind == INT:
        c = codes.astype(np.int64) if t.bits < 64 else codes.view(np.int64)
        if t.bits < 64:
            c = np.where(c >> (t.bits - 1) != 0, c - (1 << t.bits), c)
        return c
    npd = t.numpy_dtype()
    if npd is not None:
        width = {np.float16: np.uint16, np.float32: np.uint32, np.float64: np.uint64}[npd]
        return codes.astype(width).view(npd).astype(np.float64)
    E, M = t.exponent_bits, t.mantissa_bits
    sign = (codes >> np.uint64(t.bits - 1)) & np.uint64(1)
    exp = ((codes >> np.uint64(M)) & np.uint64((1 << E) - 1)).astype(np.int64)
    man = (codes & np.uint64((1 << M) - 1)).astype(np.float64)
    emin = 1 - t.bias
    mag = np.where(exp == 0,
                   np.ldexp(man, emin - M),
                   np.ldexp(man + float(1 << M), exp - t.bias - M))
    if t.has_inf_nan:
        top = exp == (1 << E) - 1
        mag = np.where(top & (man == 0), np.inf, mag)
        mag = np.where(top & (man != 0), np.nan, mag)
    return np.where(sign == 1, -mag, mag)


def encode_array(t: ScalarType, values) -> np.ndarray:
    """Encode values to ``uint64`` codes."""
    v = np.asarray(values)
    if t.kind != FLOAT:
        return _encode_int(t, v)
    npd = t.numpy_dtype()
    if npd is not None:
        width = {np.float16: np.uint16, np.float32: np.uint32, np.float64: np.uint64}[npd]
        with np.errstate(over="ignore"):
            return v.astype(np.float64).astype(npd).view(width).astype(np.uint64)
    return _encode_float(t, v.astype(np.float64))


def _encode_int(t: ScalarType, v: np.ndarray) -> np.ndarray:
    if v.dtype.kind in "iu":
        iv = v.astype(np.int64) if not (v.dtype == np.uint64) else v
        lo, hi = t.min_value, t.max_value
        if t.bits == 64 and t.kind == UINT:
            return np.asarray(np.clip(v, 0, None), dtype=np.uint64)
        clipped = np.clip(iv.astype(np.int64), max(lo, -(1 << 63)), min(hi, (1 << 63) - 1))
        return clipped.astype(np.int64).view(np.uint64) & np.uint64(t.code_mask)
    f = np.rint(np.nan_to_num(v.astype(np.float64), nan=0.0))
    f = np.clip(f, float(t.min_value), float(t.max_value))
    if t.kind == UINT:
        return f.astype(np.uint64)
    return f.astype(np.int64).view(np.uint64) & np.uint64(t.code_mask)


def _encode_float(t: ScalarType, v: np.ndarray) -> np.ndarray:
    # magnitude code = (e - emin) * 2**M + rint(|v| / 2**(e - M)) with e the
    # clamped binade exponent; carries into the next binade come for free
    E, M = t.exponent_bits, t.mantissa_bits
    emin = 1 - t.bias
    nan = np.isnan(v)
    sign = np.signbit(v).astype(np.uint64)
    a = np.abs(np.where(nan, 0.0, v))
    inf = np.isinf(a)
    a = np.where(inf, 0.0, a)
    _, ex = np.frexp(a)
    e = np.where(a == 0, emin, np.maximum(ex.astype(np.int64) - 1, emin))
    n = np.rint(np.ldexp(a, M - e))
    mag = (e - emin) * (1 << M) + n.astype(np.int64)
    if t.has_inf_nan:
        inf_code = ((1 << E) - 1) << M
        mag = np.where(inf | (mag >= inf_code), inf_code, mag)
        mag = np.where(nan, inf_code | (1 << (M - 1)), mag)
    else:
        max_code = (1 << (E + M)) - 1
        mag = np.where(inf | (mag > max_code), max_code, mag)
        mag = np.where(nan, 0, mag)
    sign = np.where(nan, 0, sign).astype(np.uint64)
    return (sign << np.uint64(t.bits - 1)) | mag.astype(np.uint64)
