"""Pseudonyms and their 38-bit frame: 7-bit m-sequence preamble + (31,26) Hamming codeword."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

PSEUDONYM_BITS = 26
CODEWORD_LEN = 31
PARITY_POSITIONS = (1, 2, 4, 8, 16)
DATA_POSITIONS = tuple(p for p in range(1, CODEWORD_LEN + 1) if p not in PARITY_POSITIONS)
FRAME_LEN = 38


def lfsr_sequence(degree: int, feedback_exponents, seed) -> np.ndarray:
    """One period of the maximal sequence with recurrence a[n+m] = sum(a[n+e] for e in exps).

    ``seed`` gives a[0..m-1]; e.g. x^3 + x + 1 is ``(3, (1, 0), (1, 1, 1))``.
    """
    a = list(seed)
    if len(a) != degree:
        raise ValueError("seed length must equal the degree")
    period = 2 ** degree - 1
    while len(a) < period:
        n = len(a) - degree
        a.append(sum(a[n + e] for e in feedback_exponents) % 2)
    return np.array(a[:period], dtype=np.uint8)


FRAME_PREAMBLE = lfsr_sequence(3, (1, 0), (1, 1, 1))  # 1110010


class DecodeStatus(enum.Enum):
    OK = "ok"
    CORRECTED_1BIT = "corrected_1bit"
    DETECTED_2BIT_UNCORRECTABLE = "detected_2bit_uncorrectable"
    PREAMBLE_FAIL = "preamble_fail"


@dataclass(frozen=True)
class DecodeVerdict:
    status: DecodeStatus
    pseudonym: Optional[int] = None

    def __post_init__(self):
        ok = self.status in (DecodeStatus.OK, DecodeStatus.CORRECTED_1BIT)
        if ok != (self.pseudonym is not None):
            raise ValueError("pseudonym present iff the frame validated")

    @property
    def valid(self) -> bool:
        return self.pseudonym is not None


def pseudonym_hex(p: int) -> str:
    return f"{p:07x}"


def parse_pseudonym(text: str) -> int:
    p = int(text, 16)
    if not 0 <= p < 2 ** PSEUDONYM_BITS:
        raise ValueError(f"pseudonym {text!r} out of 26-bit range")
    return p


def generate_pseudonym(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2 ** PSEUDONYM_BITS))


class PseudonymSource:
    """Seeded pseudonym generator; one per thread (use :meth:`clone` to fork)."""

    def __init__(self, seed=None):
        self._seed = seed
        self.rng = np.random.default_rng(seed)

    def __call__(self) -> int:
        return generate_pseudonym(self.rng)

    def clone(self, key: int) -> "PseudonymSource":
        return PseudonymSource(np.random.SeedSequence(self._seed).spawn(key + 1)[key])


def int_to_bits(value: int, n: int) -> np.ndarray:
    return np.array([(value >> (n - 1 - i)) & 1 for i in range(n)], dtype=np.uint8)


def bits_to_int(bits) -> int:
    v = 0
    for b in bits:
        v = (v << 1) | int(b)
    return v


# Parity-check matrix: column for position p is p in binary.
_H = np.array([[(p >> r) & 1 for p in range(1, CODEWORD_LEN + 1)] for r in range(5)], dtype=np.uint8)
_DATA_IDX = np.array(DATA_POSITIONS) - 1
_POS_WEIGHTS = 1 << np.arange(5)


def syndrome(word) -> int:
    w = np.asarray(word, dtype=np.uint8)
    return int(((_H @ w) % 2) @ _POS_WEIGHTS)


def hamming31_26_encode(value: int) -> np.ndarray:
    if not 0 <= value < 2 ** PSEUDONYM_BITS:
        raise ValueError("value must fit in 26 bits")
    word = np.zeros(CODEWORD_LEN, dtype=np.uint8)
    word[_DATA_IDX] = int_to_bits(value, PSEUDONYM_BITS)
    s = syndrome(word)
    for r, p in enumerate(PARITY_POSITIONS):
        word[p - 1] = (s >> r) & 1
    return word


def hamming31_26_decode(word) -> DecodeVerdict:
    """Syndrome decoding.  The code is perfect, so every word maps to a codeword;
    two flips are miscorrected, not detected."""
    w = np.array(word, dtype=np.uint8)
    if w.size != CODEWORD_LEN:
        raise ValueError(f"codeword must have {CODEWORD_LEN} bits")
    s = syndrome(w)
    status = DecodeStatus.OK
    if s:
        w[s - 1] ^= 1
        status = DecodeStatus.CORRECTED_1BIT
    return DecodeVerdict(status, bits_to_int(w[_DATA_IDX]))


def frame_encode(p: int) -> np.ndarray:
    return np.concatenate([FRAME_PREAMBLE, hamming31_26_encode(p)])


def frame_decode(bits) -> DecodeVerdict:
    b = np.asarray(bits, dtype=np.uint8)
    if b.size != FRAME_LEN:
        raise ValueError(f"frame must have {FRAME_LEN} bits, got {b.size}")
    if not np.array_equal(b[:7], FRAME_PREAMBLE):
        return DecodeVerdict(DecodeStatus.PREAMBLE_FAIL)
    return hamming31_26_decode(b[7:])
