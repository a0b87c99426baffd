import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcq.codec.huffman import entropy_decode, entropy_encode, parse_codebook
from dcq.errors import ArgumentError


def test_single_symbol_stream():
    # one-symbol alphabet codes at 1 bit per symbol by convention
    payload, codebook = entropy_encode(np.zeros(4096, dtype=np.int64))
    assert parse_codebook(codebook) == {0: 1}
    assert len(payload) == 512
    assert np.array_equal(entropy_decode(payload, codebook, 4096), np.zeros(4096))


def test_two_symbol_lengths():
    payload, codebook = entropy_encode([0, 0, 0, 1])
    assert parse_codebook(codebook) == {0: 1, 1: 1}
    assert len(payload) == 1  # 4 bits padded to one byte
    assert np.array_equal(entropy_decode(payload, codebook, 4), [0, 0, 0, 1])


def test_skewed_alphabet_roundtrip():
    rng = np.random.default_rng(0)
    stream = rng.choice([-3, -1, 0, 1, 2, 40000], p=[0.05, 0.15, 0.5, 0.2, 0.05, 0.05], size=5000)
    payload, codebook = entropy_encode(stream)
    assert np.array_equal(entropy_decode(payload, codebook, stream.size), stream)


def test_empty_rejected():
    with pytest.raises(ArgumentError):
        entropy_encode([])


def test_codebook_sizes():
    _, codebook = entropy_encode([5, 5, 5])
    assert len(codebook) == 4 + 5  # count + one (symbol, length) record


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-(2**15), 2**15), min_size=1, max_size=500))
def test_roundtrip_property(stream):
    payload, codebook = entropy_encode(stream)
    assert np.array_equal(entropy_decode(payload, codebook, len(stream)), stream)
