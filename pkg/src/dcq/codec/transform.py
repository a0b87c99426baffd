"""Transform-based error-bounded codec: separable orthonormal 4-point cosine
transform on 4^3 blocks with a power-of-two quantization step.

The step q = 2^floor(log2(eb/4)) makes the compressed size a stair-step
function of the error bound (constant between consecutive powers of two).
Because every inverse-transform row has l2 norm 1 (hence l1 norm <= 8 in 3D),
per-sample error is bounded by 8 * q/2 <= eb. Blocks where float rounding or
the index cap would break that bound are stored verbatim, flagged in a
per-block mode bitmask, so the bound is guaranteed exactly.

Edge blocks replicate the last sample; padded samples are excluded from CR
accounting (original size counts real samples only) and stay within bound
automatically because replication preserves values.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ArgumentError, FormatError
from . import huffman
from .stream import CODEC_XFORM, MODE_CODED, pack_header

BLOCK = 4
INDEX_CAP = 1 << 15
MIN_STEP = math.ldexp(1.0, -149)  # below the float32 subnormal range


def _dct_matrix() -> np.ndarray:
    n = BLOCK
    t = np.zeros((n, n), dtype=np.float64)
    for u in range(n):
        c = math.sqrt(1.0 / n) if u == 0 else math.sqrt(2.0 / n)
        for x in range(n):
            t[u, x] = c * math.cos(math.pi * (2 * x + 1) * u / (2 * n))
    return t


_T = _dct_matrix()


def _apply3(blocks: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Contract each of the last three axes of [n,4,4,4] with ``m``.

    Unoptimized einsum keeps every output element a fixed-order 4-term
    reduction, so a block's result never depends on which other blocks are in
    the batch (needed for encoder/decoder bit agreement).
    """
    x = np.einsum("nabc,ua->nbcu", blocks, m, optimize=False)
    x = np.einsum("nbcu,vb->ncuv", x, m, optimize=False)
    x = np.einsum("ncuv,wc->nuvw", x, m, optimize=False)
    return x


def quantization_step(eb_abs: float) -> float:
    """q = 2^floor(log2(eb_abs / 4)); exact via frexp."""
    if eb_abs <= 0:
        raise ArgumentError(f"eb_abs must be positive, got {eb_abs}")
    _, e = math.frexp(eb_abs / 4.0)
    return math.ldexp(1.0, e - 1)


def xform_block_quantize(block4: np.ndarray, eb_abs: float) -> tuple[np.ndarray, float]:
    """Transform and quantize one 4^3 block; returns (indices, step q)."""
    b = np.asarray(block4, dtype=np.float64)
    if b.shape != (BLOCK, BLOCK, BLOCK):
        raise ArgumentError(f"expected a {BLOCK}^3 block, got shape {b.shape}")
    q = quantization_step(eb_abs)
    coeffs = _apply3(b[None], _T)[0]
    return np.rint(coeffs / q).astype(np.int64), q


def _pad_to_blocks(data: np.ndarray) -> tuple[np.ndarray, tuple[int, int, int]]:
    nz, ny, nx = data.shape
    pz = (-nz) % BLOCK
    py = (-ny) % BLOCK
    px = (-nx) % BLOCK
    padded = np.pad(data, ((0, pz), (0, py), (0, px)), mode="edge")
    return padded, (nz + pz, ny + py, nx + px)


def _split_blocks(padded: np.ndarray) -> np.ndarray:
    gz, gy, gx = (s // BLOCK for s in padded.shape)
    return (
        padded.reshape(gz, BLOCK, gy, BLOCK, gx, BLOCK)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(-1, BLOCK, BLOCK, BLOCK)
    )


def _join_blocks(blocks: np.ndarray, padded_shape: tuple[int, int, int]) -> np.ndarray:
    gz, gy, gx = (s // BLOCK for s in padded_shape)
    return (
        blocks.reshape(gz, gy, gx, BLOCK, BLOCK, BLOCK)
        .transpose(0, 3, 1, 4, 2, 5)
        .reshape(padded_shape)
    )


def _reconstruct(indices: np.ndarray, q: float) -> np.ndarray:
    """Dequantize + inverse transform; shared by encoder and decoder so the
    reconstruction is bit-identical on both sides."""
    return _apply3(indices.astype(np.float64) * q, _T.T).astype(np.float32)


def needs_raw_fallback(eb_q: float) -> bool:
    return quantization_step(eb_q) < MIN_STEP


def encode(data: np.ndarray, eb_q: float) -> bytes:
    nz, ny, nx = data.shape
    q = quantization_step(eb_q)
    padded, pshape = _pad_to_blocks(data)
    orig_blocks = _split_blocks(padded)
    coeffs = _apply3(_split_blocks(padded.astype(np.float64)), _T)
    with np.errstate(over="ignore", invalid="ignore"):
        idx = np.rint(coeffs / q)
        raw_mask = ~(np.abs(idx) < INDEX_CAP).all(axis=(1, 2, 3))
        idx = np.where(raw_mask[:, None, None, None], 0.0, idx).astype(np.int32)

    # verify the bound on real samples, reconstructing exactly as the decoder
    # will; blocks that violate go raw and the remaining set is re-checked
    data64 = data.astype(np.float64)
    while True:
        rec_blocks = orig_blocks.copy()
        if (~raw_mask).any():
            rec_blocks[~raw_mask] = _reconstruct(idx[~raw_mask], q)
        rec = _join_blocks(rec_blocks, pshape)[:nz, :ny, :nx]
        err = np.abs(rec.astype(np.float64) - data64)
        err_pad = np.pad(err, ((0, pshape[0] - nz), (0, pshape[1] - ny), (0, pshape[2] - nx)))
        viol = _split_blocks(err_pad).max(axis=(1, 2, 3)) > float(eb_q)
        viol &= ~raw_mask
        if not viol.any():
            break
        raw_mask |= viol

    header = pack_header(CODEC_XFORM, MODE_CODED, (nx, ny, nz), eb_q)
    bitmask = np.packbits(raw_mask.astype(np.uint8)).tobytes()
    coded = idx[~raw_mask]
    if coded.size:
        payload, codebook = huffman.entropy_encode(coded.ravel())
    else:
        payload, codebook = b"", b""
    raw_blocks = orig_blocks[raw_mask].astype("<f4")
    return header + bitmask + codebook + payload + raw_blocks.tobytes()


def decode_body(body: bytes, dims: tuple[int, int, int], eb_q: float) -> np.ndarray:
    nx, ny, nz = dims
    q = quantization_step(eb_q)
    pshape = tuple(s + (-s) % BLOCK for s in (nz, ny, nx))
    n_blocks = (pshape[0] // BLOCK) * (pshape[1] // BLOCK) * (pshape[2] // BLOCK)
    mask_bytes = (n_blocks + 7) // 8
    if len(body) < mask_bytes:
        raise FormatError("stream truncated inside the block-mode bitmask")
    raw_mask = np.unpackbits(np.frombuffer(body, np.uint8, count=mask_bytes))[:n_blocks].astype(bool)
    off = mask_bytes
    n_coded = int((~raw_mask).sum())

    blocks = np.zeros((n_blocks, BLOCK, BLOCK, BLOCK), dtype=np.float32)
    if n_coded:
        lengths = huffman.parse_codebook(body[off:])
        cb_len = 4 + 5 * len(lengths)
        n_sym = n_coded * BLOCK**3
        sym, bits = huffman.decode_with_bit_count(body[off + cb_len:], body[off:off + cb_len], n_sym)
        off += cb_len + (bits + 7) // 8
        idx = sym.astype(np.int32).reshape(n_coded, BLOCK, BLOCK, BLOCK)
        blocks[~raw_mask] = _reconstruct(idx, q)
    n_raw = int(raw_mask.sum())
    if n_raw:
        need = n_raw * BLOCK**3
        raw = np.frombuffer(body, dtype="<f4", count=need, offset=off)
        blocks[raw_mask] = raw.reshape(n_raw, BLOCK, BLOCK, BLOCK)
    return _join_blocks(blocks, pshape)[:nz, :ny, :nx].copy()
