"""Two self-contained error-bounded lossy codecs with measured byte sizes.

``pred-eb`` removes redundancy with an order-1 Lorenzo predictor and uniform
residual quantization; ``xform-eb`` uses a separable orthonormal 4-point
cosine transform with power-of-two steps. Both guarantee the absolute error
bound exactly (outlier/raw fallbacks, never a tolerance), produce
byte-identical streams for identical inputs, and Huffman-code their indices
so compression ratio is a measured quantity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..errors import ArgumentError, DataError, FormatError
from . import predictive, transform
from .huffman import entropy_decode, entropy_encode
from .predictive import OUTLIER_SENTINEL, lorenzo_predict, pred_quantize
from .stream import (
    CODEC_PRED,
    CODEC_XFORM,
    HEADER_SIZE,
    MODE_CONSTANT,
    MODE_RAW,
    pack_header,
    parse_header,
)
from .transform import quantization_step, xform_block_quantize

__all__ = [
    "CodecId",
    "ErrorBound",
    "CodecOutcome",
    "compress",
    "decompress",
    "compress_roundtrip",
    "entropy_encode",
    "entropy_decode",
    "lorenzo_predict",
    "pred_quantize",
    "xform_block_quantize",
    "quantization_step",
    "OUTLIER_SENTINEL",
    "HEADER_SIZE",
]


class CodecId(Enum):
    PRED_EB = "pred-eb"
    XFORM_EB = "xform-eb"

    @classmethod
    def from_name(cls, name: str) -> "CodecId":
        for member in cls:
            if member.value == name:
                return member
        raise ArgumentError(f"unknown codec {name!r}; expected one of "
                            f"{[m.value for m in cls]}")


_CODEC_BYTE = {CodecId.PRED_EB: CODEC_PRED, CodecId.XFORM_EB: CODEC_XFORM}
_BYTE_CODEC = {v: k for k, v in _CODEC_BYTE.items()}


@dataclass
class ErrorBound:
    rel: float  # relative bound, fraction of the data's value range
    abs: float  # rel * (vmax - vmin) of the data being compressed


@dataclass
class CodecOutcome:
    codec: CodecId
    eb: ErrorBound
    compressed_bytes: int
    reconstruction: np.ndarray
    max_abs_error: float


def _as_array(data) -> np.ndarray:
    arr = data.data if hasattr(data, "data") and isinstance(getattr(data, "data"), np.ndarray) else data
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 3:
        raise ArgumentError(f"codec input must be a 3D volume, got shape {arr.shape}")
    if arr.size == 0:
        raise ArgumentError("codec input is empty")
    if not np.isfinite(arr).all():
        raise DataError("codec input contains non-finite samples")
    return arr


def _quantization_bound(eb_rel: float, vmin: float, vmax: float) -> float:
    """float32 bound used by the quantizers, rounded toward zero so it never
    exceeds the exact float64 bound rel * range."""
    eb_abs = eb_rel * (vmax - vmin)
    eb_q = np.float32(eb_abs)
    if float(eb_q) > eb_abs:
        eb_q = np.nextafter(eb_q, np.float32(0.0))
    return float(eb_q)


def compress(codec: CodecId, data, eb_rel: float) -> bytes:
    """Compress a 3D volume (or Block/VolumeField) to a byte stream."""
    if eb_rel <= 0:
        raise ArgumentError(f"eb_rel must be positive, got {eb_rel}")
    arr = _as_array(data)
    nz, ny, nx = arr.shape
    dims = (nx, ny, nz)
    vmin = float(arr.min())
    vmax = float(arr.max())
    cbyte = _CODEC_BYTE[codec]

    if vmax == vmin:
        return pack_header(cbyte, MODE_CONSTANT, dims, 0.0) + struct.pack("<f", vmin)

    eb_q = _quantization_bound(eb_rel, vmin, vmax)
    if eb_q <= 0.0 or (codec is CodecId.XFORM_EB and transform.needs_raw_fallback(eb_q)):
        return pack_header(cbyte, MODE_RAW, dims, eb_q) + arr.astype("<f4").tobytes()

    if codec is CodecId.PRED_EB:
        return predictive.encode(arr, eb_q)
    return transform.encode(arr, eb_q)


def decompress(blob: bytes) -> tuple[CodecId, np.ndarray]:
    """Decode a stream back to (codec id, reconstruction [z, y, x])."""
    cbyte, mode, dims, eb_q = parse_header(blob)
    codec = _BYTE_CODEC[cbyte]
    nx, ny, nz = dims
    n = nx * ny * nz
    body = blob[HEADER_SIZE:]
    if mode == MODE_CONSTANT:
        if len(body) < 4:
            raise FormatError("constant stream missing its stored value")
        (value,) = struct.unpack_from("<f", body, 0)
        return codec, np.full((nz, ny, nx), value, dtype=np.float32)
    if mode == MODE_RAW:
        if len(body) < 4 * n:
            raise FormatError(f"raw stream truncated: need {4 * n} bytes, have {len(body)}")
        return codec, np.frombuffer(body, dtype="<f4", count=n).reshape(nz, ny, nx).copy()
    if codec is CodecId.PRED_EB:
        return codec, predictive.decode_body(body, dims, eb_q)
    return codec, transform.decode_body(body, dims, eb_q)


def compress_roundtrip(codec: CodecId, data, eb_rel: float) -> CodecOutcome:
    """One compress/decompress round trip with measured size and error."""
    arr = _as_array(data)
    blob = compress(codec, arr, eb_rel)
    _, recon = decompress(blob)
    vmin = float(arr.min())
    vmax = float(arr.max())
    eb = ErrorBound(rel=float(eb_rel), abs=float(eb_rel) * (vmax - vmin))
    err = float(np.max(np.abs(arr.astype(np.float64) - recon.astype(np.float64))))
    return CodecOutcome(
        codec=codec,
        eb=eb,
        compressed_bytes=len(blob),
        reconstruction=recon,
        max_abs_error=err,
    )
