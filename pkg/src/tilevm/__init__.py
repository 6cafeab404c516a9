"""CPU simulator for block-level tile programs with low-precision register tensors."""

from .dtypes import ScalarType, all_lowprec_types, as_dtype, decode, encode, parse_dtype
from .interpreter import ExecutionError, ProgramInvalid, RegisterTensor, RunResult, reinterpret, run
from .ir import Program, ProgramParseError, eval_grid, from_json, parse_expr, to_json
from .layout import (Layout, LayoutError, column_local, column_spatial, compose, divide, evaluate,
                     invert, local, parse_layout, ravel, spatial, unravel)
from .oracle import oracle_matmul
from .packing import PackedBuffer, load_element, store_element
from .validate import Diagnostic, validate
from .weights import compatible_u8_layout, transform_weights, weight_tile_layout

__version__ = "0.1.0"
