"""Canonical Huffman coding over signed integer alphabets.

The codebook serializes as ``u32 count`` followed by ``count`` records of
``(i32 symbol, u8 code length)``. Codes are canonical (assigned in
(length, symbol) order) so the codebook alone reconstructs the code exactly.
A single-symbol alphabet is coded at 1 bit per symbol by convention.
"""

from __future__ import annotations

import heapq
import struct

import numpy as np

from ..errors import ArgumentError, FormatError

_PEEK_BITS = 16  # decode-table window; longer codes take the bitwise path


def _code_lengths(symbols: np.ndarray, counts: np.ndarray) -> dict[int, int]:
    """Optimal prefix code lengths; ties broken deterministically."""
    n = len(symbols)
    if n == 1:
        return {int(symbols[0]): 1}
    # standard Huffman merge over node ids with parent pointers
    parent = [-1] * (2 * n - 1)
    heap = [(int(c), i, i) for i, c in enumerate(counts)]
    heapq.heapify(heap)
    next_id = n
    while len(heap) > 1:
        c1, _, a = heapq.heappop(heap)
        c2, _, b = heapq.heappop(heap)
        parent[a] = next_id
        parent[b] = next_id
        heapq.heappush(heap, (c1 + c2, next_id, next_id))
        next_id += 1
    lengths = {}
    for i, sym in enumerate(symbols):
        depth = 0
        node = i
        while parent[node] != -1:
            node = parent[node]
            depth += 1
        lengths[int(sym)] = depth
    return lengths


def _canonical_codes(lengths: dict[int, int]) -> dict[int, tuple[int, int]]:
    """Map symbol -> (code, length) in canonical (length, symbol) order."""
    ordered = sorted(lengths.items(), key=lambda kv: (kv[1], kv[0]))
    codes = {}
    code = 0
    prev_len = ordered[0][1]
    for sym, ln in ordered:
        code <<= ln - prev_len
        prev_len = ln
        codes[sym] = (code, ln)
        code += 1
    return codes


def entropy_encode(indices) -> tuple[bytes, bytes]:
    """Encode an integer sequence; returns (payload bytes, codebook bytes)."""
    arr = np.asarray(indices, dtype=np.int64).ravel()
    if arr.size == 0:
        raise ArgumentError("cannot entropy-encode an empty sequence")
    symbols, counts = np.unique(arr, return_counts=True)
    lengths = _code_lengths(symbols, counts)
    codes = _canonical_codes(lengths)

    codebook = struct.pack("<I", len(symbols))
    for sym in symbols:
        codebook += struct.pack("<iB", int(sym), lengths[int(sym)])

    # vectorized bit packing: one pass per bit position of the longest code
    sym_sorted = symbols  # np.unique returns sorted symbols
    code_by_sym = np.array([codes[int(s)][0] for s in sym_sorted], dtype=np.uint64)
    len_by_sym = np.array([codes[int(s)][1] for s in sym_sorted], dtype=np.uint8)
    pos = np.searchsorted(sym_sorted, arr)
    occ_codes = code_by_sym[pos]
    occ_lens = len_by_sym[pos].astype(np.int64)
    offsets = np.cumsum(occ_lens) - occ_lens
    total_bits = int(occ_lens.sum())
    bits = np.zeros(total_bits, dtype=np.uint8)
    max_len = int(occ_lens.max())
    for b in range(max_len):
        active = occ_lens > b
        shift = (occ_lens[active] - 1 - b).astype(np.uint64)
        bits[offsets[active] + b] = ((occ_codes[active] >> shift) & np.uint64(1)).astype(np.uint8)
    payload = np.packbits(bits).tobytes()
    return payload, codebook


def parse_codebook(codebook: bytes) -> dict[int, int]:
    """Decode the serialized codebook back to {symbol: length}."""
    if len(codebook) < 4:
        raise FormatError("codebook shorter than its count field")
    (n,) = struct.unpack_from("<I", codebook, 0)
    expected = 4 + 5 * n
    if len(codebook) < expected:
        raise FormatError(f"codebook truncated: expected {expected} bytes, got {len(codebook)}")
    lengths = {}
    off = 4
    for _ in range(n):
        sym, ln = struct.unpack_from("<iB", codebook, off)
        off += 5
        lengths[sym] = ln
    return lengths


def entropy_decode(payload: bytes, codebook: bytes, n_symbols: int) -> np.ndarray:
    """Inverse of entropy_encode; decodes exactly ``n_symbols`` values."""
    arr, _ = decode_with_bit_count(payload, codebook, n_symbols)
    return arr


def decode_with_bit_count(payload: bytes, codebook: bytes, n_symbols: int) -> tuple[np.ndarray, int]:
    """Decode ``n_symbols`` values and report how many bits were consumed.

    Codes up to 16 bits resolve through a peek table indexed by the next 16
    bits of the stream; longer codes (rare, skewed alphabets) fall back to a
    bit-at-a-time canonical walk.
    """
    lengths = parse_codebook(codebook)
    codes = _canonical_codes(lengths)
    max_len = max(ln for _, ln in codes.values())
    t = min(_PEEK_BITS, max_len)
    size = 1 << t
    table_sym = [0] * size
    table_len = [0] * size
    long_codes = {}
    for sym, (code, ln) in codes.items():
        if ln <= t:
            base = code << (t - ln)
            for slot in range(base, base + (1 << (t - ln))):
                table_sym[slot] = sym
                table_len[slot] = ln
        else:
            long_codes[(1 << ln) | code] = sym

    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    nbits = bits.size
    padded = np.concatenate([bits, np.zeros(t, np.uint8)])
    window = np.zeros(nbits + 1, dtype=np.uint32)
    for j in range(t):
        window[: nbits + 1] |= padded[j : j + nbits + 1].astype(np.uint32) << np.uint32(t - 1 - j)
    win = window.tolist()
    bit_list = bits.tolist() if long_codes else None

    out = np.empty(n_symbols, dtype=np.int64)
    k = 0
    for i in range(n_symbols):
        if k >= nbits:
            raise FormatError("payload exhausted before all symbols were decoded")
        w = win[k]
        ln = table_len[w]
        if ln:
            out[i] = table_sym[w]
            k += ln
            continue
        acc = 1
        kk = k
        sym = None
        while sym is None:
            if kk >= nbits:
                raise FormatError("payload exhausted before all symbols were decoded")
            acc = (acc << 1) | bit_list[kk]
            kk += 1
            sym = long_codes.get(acc)
        out[i] = sym
        k = kk
    if k > nbits:
        raise FormatError("payload exhausted before all symbols were decoded")
    return out, k
