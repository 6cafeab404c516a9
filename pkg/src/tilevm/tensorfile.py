"""TLUS binary tensor files.

Layout (little-endian)::

    magic  b"TLUS"
    u16    version (1 = plain, 2 = with metadata)
    u8 u8 u8 u8   dtype kind, bits, exponent bits, mantissa bits
    u8     rank
    u64 * rank    dims
    [v2] u32 metadata length, then that many bytes of UTF-8 JSON
    payload: ceil(prod(dims) * bits / 8) packed bytes

Kind codes: 0 unsigned int, 1 signed int, 2 float.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

from .dtypes import FLOAT, INT, UINT, ScalarType
from .packing import PackedBuffer, packed_nbytes

MAGIC = b"TLUS"
_KIND_CODE = {UINT: 0, INT: 1, FLOAT: 2}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


class TensorFileError(ValueError):
    pass


def dumps(buf: PackedBuffer, metadata: Optional[dict] = None) -> bytes:
    t = buf.dtype
    version = 2 if metadata else 1
    head = MAGIC + struct.pack("<HBBBBB", version, _KIND_CODE[t.kind], t.bits,
                               t.exponent_bits, t.mantissa_bits, len(buf.shape))
    head += struct.pack(f"<{len(buf.shape)}Q", *buf.shape)
    if metadata:
        meta = json.dumps(metadata, sort_keys=True).encode()
        head += struct.pack("<I", len(meta)) + meta
    return head + bytes(buf.data)


def loads(blob: bytes) -> tuple[PackedBuffer, dict]:
    if blob[:4] != MAGIC:
        raise TensorFileError("not a TLUS file (bad magic)")
    try:
        version, kind, bits, e, m, rank = struct.unpack_from("<HBBBBB", blob, 4)
        pos = 11
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        meta = {}
        if version == 2:
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            meta = json.loads(blob[pos:pos + n].decode())
            pos += n
        elif version != 1:
            raise TensorFileError(f"unsupported TLUS version {version}")
    except struct.error as exc:
        raise TensorFileError(f"truncated TLUS header: {exc}") from None
    if kind not in _CODE_KIND:
        raise TensorFileError(f"unknown dtype kind code {kind}")
    dtype = ScalarType(_CODE_KIND[kind], bits, e, m)
    count = 1
    for d in dims:
        count *= d
    payload = blob[pos:]
    if len(payload) != packed_nbytes(count, bits):
        raise TensorFileError(
            f"payload is {len(payload)} bytes, expected {packed_nbytes(count, bits)}")
    return PackedBuffer(dtype, dims, bytearray(payload)), meta


def save(path, buf: PackedBuffer, metadata: Optional[dict] = None) -> None:
    Path(path).write_bytes(dumps(buf, metadata))


def load(path) -> tuple[PackedBuffer, dict]:
    return loads(Path(path).read_bytes())
