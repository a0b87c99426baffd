"""Compressed stream framing shared by both codecs.

Layout: a fixed 16-byte header, then codec-specific sections. The header
packs magic (4 bytes, carries the format version), codec id, stream mode,
dims as three u16, and the float32 absolute error bound actually used for
quantization (rounded toward zero from rel * range, so it never exceeds the
exact bound).
"""

from __future__ import annotations

import struct

from ..errors import DimensionError, FormatError

MAGIC = b"DCQ1"
HEADER_SIZE = 16
HEADER_FMT = "<4sBBHHHf"

CODEC_PRED = 1
CODEC_XFORM = 2

MODE_CODED = 0
MODE_CONSTANT = 1  # degenerate input: payload is the single float32 value
MODE_RAW = 2  # verbatim float32 samples (bound too small to quantize)

_MAX_DIM = 0xFFFF


def pack_header(codec: int, mode: int, dims, eb_q: float) -> bytes:
    nx, ny, nz = dims
    if max(nx, ny, nz) > _MAX_DIM:
        raise DimensionError(f"dims {dims} exceed the stream format limit of {_MAX_DIM}")
    return struct.pack(HEADER_FMT, MAGIC, codec, mode, nx, ny, nz, eb_q)


def parse_header(blob: bytes) -> tuple[int, int, tuple[int, int, int], float]:
    if len(blob) < HEADER_SIZE:
        raise FormatError(f"stream shorter than the {HEADER_SIZE}-byte header")
    magic, codec, mode, nx, ny, nz, eb_q = struct.unpack_from(HEADER_FMT, blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad stream magic {magic!r}, expected {MAGIC!r}")
    if codec not in (CODEC_PRED, CODEC_XFORM):
        raise FormatError(f"unknown codec id {codec}")
    if mode not in (MODE_CODED, MODE_CONSTANT, MODE_RAW):
        raise FormatError(f"unknown stream mode {mode}")
    return codec, mode, (nx, ny, nz), eb_q
