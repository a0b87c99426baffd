"""Prediction-based error-bounded codec: order-1 Lorenzo predictor plus
uniform residual quantization and Huffman-coded indices.

Predictions always read *reconstructed* values so compressor and decompressor
agree bit-for-bit. Points whose quantization index would reach the outlier
cap (2^15), or whose float32 reconstruction would land outside the bound, are
stored verbatim; the quantizer therefore guarantees the bound exactly rather
than probabilistically.

The sequential Lorenzo dependency is processed as anti-diagonal wavefronts
(all points with equal i+j+k are mutually independent), which keeps the sweep
vectorized while preserving raster-order semantics.
"""

from __future__ import annotations

import struct
from functools import lru_cache

import numpy as np

from ..errors import FormatError
from . import huffman
from .stream import CODEC_PRED, MODE_CODED, pack_header

OUTLIER_CAP = 1 << 15  # indices with |index| >= this become outliers
OUTLIER_SENTINEL = OUTLIER_CAP  # symbol emitted in the index stream


def lorenzo_predict(recon_so_far: np.ndarray, idx) -> float:
    """Order-1 Lorenzo prediction at ``idx`` = (i, j, k) = (x, y, z).

    ``recon_so_far`` is indexed [z, y, x]; out-of-range neighbors read as 0.
    All referenced neighbors precede ``idx`` in x-fastest raster order.
    """
    i, j, k = idx

    def f(a, b, c):
        if a < 0 or b < 0 or c < 0:
            return 0.0
        return float(recon_so_far[c, b, a])

    return (
        f(i - 1, j, k)
        + f(i, j - 1, k)
        + f(i, j, k - 1)
        - f(i - 1, j - 1, k)
        - f(i - 1, j, k - 1)
        - f(i, j - 1, k - 1)
        + f(i - 1, j - 1, k - 1)
    )


def pred_quantize(value: float, prediction: float, eb_abs: float) -> tuple[int, float]:
    """Quantize a residual to a bin of width 2*eb_abs.

    Returns (index, reconstruction). If |index| would reach 2^15 the point is
    an outlier: the sentinel index is returned and the reconstruction is the
    value itself (stored losslessly in the stream).
    """
    index = round((value - prediction) / (2.0 * eb_abs))
    if abs(index) >= OUTLIER_CAP:
        return OUTLIER_SENTINEL, value
    return index, prediction + index * 2.0 * eb_abs


@lru_cache(maxsize=8)
def _plan(dims: tuple[int, int, int]):
    """Wavefront schedule for one volume shape.

    Returns flat raster indices grouped by wavefront, the matching flat
    indices into the zero-padded reconstruction buffer, per-wavefront slice
    bounds, and the padded-axis strides.
    """
    nx, ny, nz = dims
    zz, yy, xx = np.meshgrid(
        np.arange(nz, dtype=np.int64),
        np.arange(ny, dtype=np.int64),
        np.arange(nx, dtype=np.int64),
        indexing="ij",
    )
    s = (xx + yy + zz).ravel()
    order = np.argsort(s, kind="stable")
    counts = np.bincount(s, minlength=nx + ny + nz - 2)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    pz = (zz.ravel()[order] + 1)
    py = (yy.ravel()[order] + 1)
    px = (xx.ravel()[order] + 1)
    offx = 1
    offy = nx + 1
    offz = (ny + 1) * (nx + 1)
    padded = pz * offz + py * offy + px * offx
    return order, padded, bounds, (offx, offy, offz)


def _predict(rp: np.ndarray, pf: np.ndarray, offs) -> np.ndarray:
    # term order matches the 7-term Lorenzo sum; keep it fixed for bit-stability
    offx, offy, offz = offs
    return (
        rp[pf - offx]
        + rp[pf - offy]
        + rp[pf - offz]
        - rp[pf - offx - offy]
        - rp[pf - offx - offz]
        - rp[pf - offy - offz]
        + rp[pf - offx - offy - offz]
    )


def _sweep_encode(data: np.ndarray, eb_q: float):
    """Quantize one volume; returns (indices, outlier values, reconstruction).

    ``indices`` is int32 in raster order with OUTLIER_SENTINEL at outliers;
    outlier values are the original float32 samples in raster order.
    """
    nz, ny, nx = data.shape
    order, padded, bounds, offs = _plan((nx, ny, nz))
    rp = np.zeros((nz + 1) * (ny + 1) * (nx + 1), dtype=np.float32)
    flat32 = data.ravel()
    flat64 = flat32.astype(np.float64)
    idx_flat = np.zeros(flat32.size, dtype=np.int32)
    out_mask = np.zeros(flat32.size, dtype=bool)
    eb64 = float(eb_q)
    two_eb = 2.0 * eb64
    with np.errstate(over="ignore", invalid="ignore"):
        for w in range(len(bounds) - 1):
            a, b = bounds[w], bounds[w + 1]
            rf = order[a:b]
            pf = padded[a:b]
            pred = _predict(rp, pf, offs)
            q = np.rint((flat64[rf] - pred.astype(np.float64)) / two_eb)
            om = ~(np.abs(q) < OUTLIER_CAP)  # catches inf/nan too
            delta = (q * two_eb).astype(np.float32)
            rec = pred + delta
            om |= np.abs(rec.astype(np.float64) - flat64[rf]) > eb64
            rec = np.where(om, flat32[rf], rec)
            qs = np.where(om, 0.0, q).astype(np.int32)
            qs[om] = OUTLIER_SENTINEL
            idx_flat[rf] = qs
            out_mask[rf] = om
            rp[pf] = rec
    recon = rp.reshape(nz + 1, ny + 1, nx + 1)[1:, 1:, 1:].copy()
    return idx_flat, flat32[out_mask], recon


def _sweep_decode(idx_flat: np.ndarray, outlier_values: np.ndarray,
                  dims: tuple[int, int, int], eb_q: float) -> np.ndarray:
    nx, ny, nz = dims
    order, padded, bounds, offs = _plan(dims)
    rp = np.zeros((nz + 1) * (ny + 1) * (nx + 1), dtype=np.float32)
    outvals = np.zeros(idx_flat.size, dtype=np.float32)
    positions = np.flatnonzero(idx_flat == OUTLIER_SENTINEL)
    if positions.size != outlier_values.size:
        raise FormatError(
            f"outlier count mismatch: stream has {outlier_values.size}, "
            f"index stream marks {positions.size}"
        )
    outvals[positions] = outlier_values
    eb64 = float(eb_q)
    two_eb = 2.0 * eb64
    for w in range(len(bounds) - 1):
        a, b = bounds[w], bounds[w + 1]
        rf = order[a:b]
        pf = padded[a:b]
        pred = _predict(rp, pf, offs)
        qi = idx_flat[rf]
        om = qi == OUTLIER_SENTINEL
        q = np.where(om, 0, qi).astype(np.float64)
        delta = (q * two_eb).astype(np.float32)
        rec = pred + delta
        rec = np.where(om, outvals[rf], rec)
        rp[pf] = rec
    return rp.reshape(nz + 1, ny + 1, nx + 1)[1:, 1:, 1:].copy()


def encode(data: np.ndarray, eb_q: float) -> bytes:
    """Full coded stream for one volume at quantization bound ``eb_q`` > 0."""
    nz, ny, nx = data.shape
    idx_flat, outlier_values, _ = _sweep_encode(data, eb_q)
    payload, codebook = huffman.entropy_encode(idx_flat)
    header = pack_header(CODEC_PRED, MODE_CODED, (nx, ny, nz), eb_q)
    outsec = struct.pack("<I", outlier_values.size) + outlier_values.astype("<f4").tobytes()
    return header + codebook + payload + outsec


def decode_body(body: bytes, dims: tuple[int, int, int], eb_q: float) -> np.ndarray:
    """Decode the post-header sections of a coded stream."""
    nx, ny, nz = dims
    n = nx * ny * nz
    lengths = huffman.parse_codebook(body)
    cb_len = 4 + 5 * len(lengths)
    idx_flat, bits = huffman.decode_with_bit_count(body[cb_len:], body[:cb_len], n)
    payload_len = (bits + 7) // 8
    off = cb_len + payload_len
    (n_out,) = struct.unpack_from("<I", body, off)
    off += 4
    outlier_values = np.frombuffer(body, dtype="<f4", count=n_out, offset=off)
    return _sweep_decode(idx_flat.astype(np.int32), outlier_values, dims, eb_q)
