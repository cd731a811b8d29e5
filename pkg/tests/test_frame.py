import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stopsec.frame import (
    CODEWORD_LEN, FRAME_LEN, FRAME_PREAMBLE, DecodeStatus, DecodeVerdict, PseudonymSource,
    bits_to_int, frame_decode, frame_encode, hamming31_26_decode, hamming31_26_encode,
    int_to_bits, lfsr_sequence, parse_pseudonym, pseudonym_hex, syndrome,
)

pseudonyms = st.integers(0, 2 ** 26 - 1)


def test_frame_preamble_is_the_degree3_msequence():
    assert FRAME_PREAMBLE.tolist() == [1, 1, 1, 0, 0, 1, 0]


@pytest.mark.parametrize("deg,taps,seed", [(3, (1, 0), (1, 1, 1)), (4, (3, 0), (0, 0, 0, 1))])
def test_msequence_autocorrelation_is_two_valued(deg, taps, seed):
    a = 2.0 * lfsr_sequence(deg, taps, seed) - 1
    n = 2 ** deg - 1
    ac = [np.dot(a, np.roll(a, k)) for k in range(n)]
    assert ac[0] == n
    assert all(v == -1 for v in ac[1:])


def test_lfsr_seed_length_checked():
    with pytest.raises(ValueError):
        lfsr_sequence(4, (3, 0), (1, 0, 1))


def _brute_hamming_oracle():
    # independent construction: parity bit at position 2^r covers positions with bit r set
    def enc(v):
        w = [0] * 32
        data = [p for p in range(1, 32) if p & (p - 1)]
        for p, b in zip(data, int_to_bits(v, 26)):
            w[p] = int(b)
        for r in range(5):
            w[1 << r] = sum(w[p] for p in range(1, 32) if p >> r & 1) % 2
        return np.array(w[1:], dtype=np.uint8)
    return enc


@given(pseudonyms)
def test_encoder_matches_positional_parity_oracle(v):
    assert np.array_equal(hamming31_26_encode(v), _brute_hamming_oracle()(v))


@given(pseudonyms)
def test_codewords_have_zero_syndrome_and_round_trip(v):
    w = hamming31_26_encode(v)
    assert syndrome(w) == 0
    d = hamming31_26_decode(w)
    assert d.status is DecodeStatus.OK and d.pseudonym == v


@given(pseudonyms, st.integers(0, CODEWORD_LEN - 1))
def test_any_single_flip_is_corrected(v, pos):
    w = hamming31_26_encode(v)
    w[pos] ^= 1
    d = hamming31_26_decode(w)
    assert d.status is DecodeStatus.CORRECTED_1BIT and d.pseudonym == v


@given(pseudonyms, st.lists(st.integers(0, CODEWORD_LEN - 1), min_size=2, max_size=2, unique=True))
def test_double_flip_is_miscorrected_not_detected(v, pos):
    # perfect code: every word lies within distance 1 of exactly one codeword
    w = hamming31_26_encode(v)
    w[pos] ^= 1
    d = hamming31_26_decode(w)
    assert d.status is DecodeStatus.CORRECTED_1BIT
    assert d.pseudonym != v


def test_sphere_packing_is_perfect():
    assert 2 ** 26 * (1 + 31) == 2 ** 31


@given(pseudonyms, pseudonyms)
def test_encoder_is_linear(a, b):
    assert np.array_equal(hamming31_26_encode(a) ^ hamming31_26_encode(b), hamming31_26_encode(a ^ b))


def test_encoder_rejects_out_of_range():
    for v in (-1, 2 ** 26):
        with pytest.raises(ValueError):
            hamming31_26_encode(v)


@given(pseudonyms)
def test_frame_round_trip(v):
    f = frame_encode(v)
    assert f.size == FRAME_LEN
    assert frame_decode(f) == DecodeVerdict(DecodeStatus.OK, v)


@given(pseudonyms, st.integers(0, 6))
def test_preamble_error_fails_frame(v, pos):
    f = frame_encode(v)
    f[pos] ^= 1
    assert frame_decode(f).status is DecodeStatus.PREAMBLE_FAIL
    assert not frame_decode(f).valid


def test_frame_length_checked():
    with pytest.raises(ValueError):
        frame_decode(np.zeros(37, dtype=np.uint8))


def test_verdict_invariant():
    with pytest.raises(ValueError):
        DecodeVerdict(DecodeStatus.OK)
    with pytest.raises(ValueError):
        DecodeVerdict(DecodeStatus.PREAMBLE_FAIL, 5)


@given(pseudonyms)
def test_hex_round_trip(v):
    s = pseudonym_hex(v)
    assert len(s) == 7 and parse_pseudonym(s) == v


def test_parse_rejects_wide_values():
    with pytest.raises(ValueError):
        parse_pseudonym("4000000")
    with pytest.raises(ValueError):
        parse_pseudonym("xyz")


@given(st.integers(0, 2 ** 20 - 1))
def test_bit_helpers(v):
    assert bits_to_int(int_to_bits(v, 20)) == v


def test_pseudonym_source_is_seeded_and_clones_diverge():
    a, b = PseudonymSource(7), PseudonymSource(7)
    xs = [a() for _ in range(5)]
    assert xs == [b() for _ in range(5)]
    assert all(0 <= x < 2 ** 26 for x in xs)
    c0, c1 = PseudonymSource(7).clone(0), PseudonymSource(7).clone(1)
    assert [c0() for _ in range(4)] != [c1() for _ in range(4)]


def test_pseudonyms_look_uniform():
    src = PseudonymSource(1)
    v = np.array([src() for _ in range(4000)])
    bits = (v[:, None] >> np.arange(26)) & 1
    # each bit position near 1/2 (4 sigma)
    assert np.all(np.abs(bits.mean(axis=0) - 0.5) < 4 * 0.5 / np.sqrt(4000))
