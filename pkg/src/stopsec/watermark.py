"""Coded-modulation watermarks: chip codes and per-symbol gain sequences.

A P-bit is sent as ``L`` chips, each spanning ``symbols_per_chip`` OFDM
symbols.  Chip ``l`` of bit ``p`` has bipolar level ``b = 2*A_p[l] - 1`` and
the host is scaled by ``1 - alpha*b``; with ``alpha = 1`` the pseudonym carrier
is either off or at twice its nominal amplitude.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frame import lfsr_sequence
from .ofdm import DataPayload, IqBlock, OfdmConfig, modulate_packet, modulate_packets, symbols_to_time

SYMBOLS_PER_PACKET = 100


class CodeTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class ChipCode:
    name: str
    chips_bit1: tuple
    symbols_per_chip: int

    def __post_init__(self):
        chips = tuple(int(c) for c in self.chips_bit1)
        if not chips or any(c not in (0, 1) for c in chips):
            raise ValueError(f"{self.name}: chips must be a non-empty 0/1 sequence")
        object.__setattr__(self, "chips_bit1", chips)
        ones = sum(chips)
        if abs(2 * ones - len(chips)) > 1:
            raise ValueError(f"{self.name}: chip code is unbalanced")
        if self.symbols_per_chip < 1:
            raise ValueError("symbols_per_chip must be positive")

    @property
    def length(self) -> int:
        return len(self.chips_bit1)

    @property
    def chips_bit0(self) -> tuple:
        return tuple(1 - c for c in self.chips_bit1)

    def chips(self, pbit: int) -> np.ndarray:
        return np.array(self.chips_bit1 if pbit else self.chips_bit0, dtype=np.uint8)

    def bipolar(self, pbit: int = 1) -> np.ndarray:
        return 2.0 * self.chips(pbit) - 1.0

    def signature(self) -> np.ndarray:
        """Mean-removed chip energy pattern expected for P-bit 1."""
        s = 1.0 - self.chips(1)
        return s - s.mean()

    @property
    def covered_symbols(self) -> int:
        return self.length * self.symbols_per_chip

    def to_dict(self) -> dict:
        return {"name": self.name, "chips_bit1": list(self.chips_bit1),
                "symbols_per_chip": self.symbols_per_chip}

    @classmethod
    def from_dict(cls, d: dict) -> "ChipCode":
        if "chips_bit0" in d:
            raise ValueError("chips_bit0 is derived, do not store it")
        return cls(d["name"], tuple(d["chips_bit1"]), int(d["symbols_per_chip"]))


def _symbols_per_chip(length: int, symbols_per_packet: int = SYMBOLS_PER_PACKET) -> int:
    return symbols_per_packet // length


def builtin_codes(symbols_per_packet: int = SYMBOLS_PER_PACKET) -> list[ChipCode]:
    # x^4 + x + 1 register (taps at stages 4 and 1), loaded 0001 and read out in order
    mseq15 = tuple(lfsr_sequence(4, (3, 0), (0, 0, 0, 1)))
    alt10 = (1, 0) * 5
    return [
        ChipCode("ALT10", alt10, _symbols_per_chip(10, symbols_per_packet)),
        ChipCode("MSEQ10", mseq15[:10], _symbols_per_chip(10, symbols_per_packet)),
        ChipCode("MSEQ15", mseq15, _symbols_per_chip(15, symbols_per_packet)),
    ]


def get_code(name: str, symbols_per_packet: int = SYMBOLS_PER_PACKET) -> ChipCode:
    for c in builtin_codes(symbols_per_packet):
        if c.name == name.upper():
            return c
    raise KeyError(f"unknown chip code {name!r}")


def load_codes(path) -> list[ChipCode]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [ChipCode.from_dict(d) for d in data]


class SchemeKind(str, enum.Enum):
    UNWATERMARKED = "unwatermarked"
    STOPSEC = "stopsec"
    CM_FULLBAND = "cm_fullband"
    PAM_FULLBAND = "pam_fullband"


@dataclass(frozen=True)
class WatermarkScheme:
    kind: SchemeKind = SchemeKind.STOPSEC
    modulation_index: float = 1.0
    code: ChipCode = field(default_factory=lambda: get_code("MSEQ15"))
    n_pseudonym_subcarriers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", SchemeKind(self.kind))
        a = float(self.modulation_index)
        if self.kind is SchemeKind.STOPSEC and a != 1.0:
            raise ValueError("single-subcarrier watermark always uses modulation index 1")
        if self.kind is SchemeKind.PAM_FULLBAND and not 0 < a <= 0.5:
            raise ValueError("PAM modulation index must be in (0, 0.5]")
        if not 0 <= a <= 1:
            raise ValueError("modulation index must be in [0, 1]")
        if not 1 <= self.n_pseudonym_subcarriers <= 3:
            raise ValueError("1 to 3 pseudonym subcarriers supported")

    @classmethod
    def stopsec(cls, code="MSEQ15", n_pseudonym_subcarriers=1):
        code = get_code(code) if isinstance(code, str) else code
        return cls(SchemeKind.STOPSEC, 1.0, code, n_pseudonym_subcarriers)

    @classmethod
    def cm_fullband(cls, alpha, code="MSEQ15"):
        code = get_code(code) if isinstance(code, str) else code
        return cls(SchemeKind.CM_FULLBAND, alpha, code)

    @classmethod
    def pam(cls, alpha):
        return cls(SchemeKind.PAM_FULLBAND, alpha)

    @classmethod
    def unwatermarked(cls):
        return cls(SchemeKind.UNWATERMARKED, 0.0)

    @property
    def label(self) -> str:
        if self.kind is SchemeKind.STOPSEC:
            n = self.n_pseudonym_subcarriers
            return "stopsec" if n == 1 else f"stopsec_{n}sc"
        if self.kind is SchemeKind.UNWATERMARKED:
            return "unwatermarked"
        return f"{self.kind.value}_{self.modulation_index:g}"

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "modulation_index": self.modulation_index,
                "code": self.code.to_dict(),
                "n_pseudonym_subcarriers": self.n_pseudonym_subcarriers}

    @classmethod
    def from_dict(cls, d: dict) -> "WatermarkScheme":
        kind = SchemeKind(d.get("kind", "stopsec"))
        code = d.get("code", "MSEQ15")
        code = get_code(code) if isinstance(code, str) else ChipCode.from_dict(code)
        alpha = d.get("modulation_index", d.get("alpha"))
        if alpha is None:
            alpha = 1.0 if kind is SchemeKind.STOPSEC else 0.0
        return cls(kind, float(alpha), code, int(d.get("n_pseudonym_subcarriers", 1)))


def gains_for_pbit(scheme: WatermarkScheme, pbit: int,
                   symbols_per_packet: int = SYMBOLS_PER_PACKET) -> np.ndarray:
    """Per-OFDM-symbol gain for one P-bit.

    CM_FULLBAND / PAM gains scale the whole packet.  STOPSEC gains are relative
    to the fully-on pseudonym carrier, so they are 0 or 1.
    """
    kind, a = scheme.kind, scheme.modulation_index
    if kind is SchemeKind.UNWATERMARKED:
        return np.ones(symbols_per_packet)
    if kind is SchemeKind.PAM_FULLBAND:
        return np.full(symbols_per_packet, 1 + a if pbit else 1 - a)
    code = scheme.code
    if code.covered_symbols > symbols_per_packet:
        raise CodeTooLongError(
            f"{code.name}: {code.covered_symbols} symbols exceed packet of {symbols_per_packet}")
    level = np.repeat(1.0 - a * code.bipolar(pbit), code.symbols_per_chip)
    if kind is SchemeKind.STOPSEC:
        g = np.zeros(symbols_per_packet)
        g[: level.size] = level / 2.0
    else:
        g = np.ones(symbols_per_packet)
        g[: level.size] = level
    return g


def apply_watermark(scheme: WatermarkScheme, cfg: OfdmConfig, payload: DataPayload,
                    pbit: int) -> IqBlock:
    ns = cfg.symbols_per_packet
    g = gains_for_pbit(scheme, pbit, ns)
    if scheme.kind is SchemeKind.STOPSEC:
        return modulate_packet(cfg, payload, g, scheme.n_pseudonym_subcarriers)
    blk = modulate_packet(cfg, payload, np.zeros(ns))
    x = blk.samples.copy()
    # host f(t) is the packet body; the training field is never scaled
    x[cfg.preamble_len:] *= np.repeat(g, cfg.symbol_len)
    return IqBlock(x, cfg.sample_rate_hz, f"packet:{scheme.label}")


def watermark_packets(scheme: WatermarkScheme, cfg: OfdmConfig, bits: np.ndarray,
                      pbits) -> np.ndarray:
    """Batched :func:`apply_watermark`: (B, n_bits) payload bits, B P-bits -> (B, packet_len)."""
    ns = cfg.symbols_per_packet
    pbits = np.asarray(pbits, dtype=np.uint8)
    g1, g0 = gains_for_pbit(scheme, 1, ns), gains_for_pbit(scheme, 0, ns)
    g = np.where(pbits[:, None] == 1, g1, g0)
    if scheme.kind is SchemeKind.STOPSEC:
        return modulate_packets(cfg, bits, g, scheme.n_pseudonym_subcarriers)
    x = modulate_packets(cfg, bits, np.zeros_like(g))
    x[:, cfg.preamble_len:] *= np.repeat(g, cfg.symbol_len, axis=1)
    return x


def symbol_gains_time(cfg: OfdmConfig, gains: np.ndarray) -> np.ndarray:
    return np.repeat(np.asarray(gains, dtype=float), cfg.symbol_len, axis=-1)
