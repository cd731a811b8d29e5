"""Monte-Carlo BER for the pseudonym watermark and for the host data stream.

Eb/N0 conventions (both use N0 = per-sample complex noise variance with ortho FFTs):

* pseudonym bits: Eb is the mean energy of one watermarked packet, since each
  packet carries one P-bit.  Schemes are therefore compared at equal received
  energy per P-bit.
* data bits: Eb is the mean energy per QPSK bit on the data subcarriers after
  watermark scaling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .channel import Fading, FadingKind, awgn
from .ofdm import DataPayload, IqBlock, OfdmConfig, demodulate_packet, time_to_symbols, SyncError
from .watermark import SchemeKind, WatermarkScheme, gains_for_pbit, watermark_packets

BER_HEADER = "ebno_db,ber,n_bits"
TARGET_BER = 1e-3

# pure AWGN by default; pass e.g. Fading.sinusoidal(5.0, 3.0) for slow fading
DEFAULT_FADING = Fading()


def required_bits(ber: float, confidence: float = 0.99, errors: int = 0) -> int:
    """Bits needed so that observing at most ``errors`` errors bounds the true BER
    below ``ber`` at the given confidence (Poisson / chi-square rule)."""
    if not 0 < ber < 1:
        raise ValueError("ber must be in (0, 1)")
    if not 0 < confidence < 1:
        raise ValueError("confidence must be in (0, 1)")
    return int(math.ceil(stats.chi2.ppf(confidence, 2 * (errors + 1)) / (2 * ber)))


def qpsk_ber_theory(ebno_db) -> np.ndarray:
    return 0.5 * special.erfc(np.sqrt(10 ** (np.asarray(ebno_db, float) / 10)))


@dataclass
class BerPoint:
    ebno_db: float
    errors: int
    n_bits: int

    @property
    def ber(self) -> float:
        return self.errors / self.n_bits if self.n_bits else float("nan")

    def row(self) -> str:
        return f"{self.ebno_db:g},{self.ber:.6g},{self.n_bits}"


def ber_crossing(points, target: float = TARGET_BER) -> float | None:
    """Eb/N0 where BER falls through ``target``; log-linear between the bracketing
    points.  Zero-error points count as half an error."""
    pts = sorted(points, key=lambda p: p.ebno_db)
    def lb(p):
        return math.log10(max(p.errors, 0.5) / p.n_bits)
    lt = math.log10(target)
    for a, b in zip(pts, pts[1:]):
        la, lbb = lb(a), lb(b)
        if la >= lt > lbb:
            return a.ebno_db + (lt - la) * (b.ebno_db - a.ebno_db) / (lbb - la)
    return None


# --- pseudonym BER


def packet_energy(scheme: WatermarkScheme, cfg: OfdmConfig) -> float:
    """Mean energy of one watermarked packet, averaged over the two P-bit values.
    Constant-modulus QPSK fixes the energy in frequency; only the cyclic prefix
    adds a small payload-dependent part."""
    rng = np.random.default_rng(0)
    bits = rng.integers(0, 2, (2, cfg.symbols_per_packet * cfg.bits_per_symbol), dtype=np.uint8)
    x = watermark_packets(scheme, cfg, bits, [0, 1])
    return float(np.mean(np.sum(np.abs(x) ** 2, axis=1)))


def _chip_scores(y: np.ndarray, scheme: WatermarkScheme, cfg: OfdmConfig) -> np.ndarray:
    """Correlation score per packet row; positive means P-bit 1."""
    code = scheme.code
    n_sym = code.covered_symbols
    if scheme.kind is SchemeKind.STOPSEC:
        b = cfg.cyclic_prefix_len // 2
        Y = time_to_symbols(cfg, y[:, cfg.preamble_len - b:], n_sym)
        bins = cfg.bins(cfg.pseudonym_indices(scheme.n_pseudonym_subcarriers))
        e = np.abs(Y[:, :, bins]).mean(axis=2)
    else:
        # energy detector over the whole OFDM symbol
        seg = y[:, cfg.preamble_len: cfg.preamble_len + n_sym * cfg.symbol_len]
        e = np.mean(np.abs(seg.reshape(len(y), n_sym, cfg.symbol_len)) ** 2, axis=2)
    chips = e.reshape(len(y), code.length, code.symbols_per_chip).mean(axis=2)
    return (chips - chips.mean(axis=1, keepdims=True)) @ code.signature()


def pam_decide(energies: np.ndarray, half_window: int = 4) -> np.ndarray:
    """Threshold each packet energy at the mean of up to ``half_window`` neighbours
    on each side (the packet itself excluded)."""
    e = np.asarray(energies, dtype=float)
    n = e.size
    c = np.concatenate([[0.0], np.cumsum(e)])
    i = np.arange(n)
    lo, hi = np.maximum(i - half_window, 0), np.minimum(i + half_window + 1, n)
    cnt = hi - lo - 1
    thr = (c[hi] - c[lo] - e) / np.maximum(cnt, 1)
    return (e > thr).astype(np.uint8)


def simulate_pseudonym_ber(scheme: WatermarkScheme, cfg: OfdmConfig, ebno_db: float, *,
                           fading: Fading = DEFAULT_FADING, seed=0, max_bits: int | None = None,
                           max_errors: int = 100, batch: int = 128, pam_half_window: int = 4) -> BerPoint:
    """Stream back-to-back packets (one P-bit each) through slow fading and AWGN.

    Stops at ``max_errors`` errors or ``max_bits`` bits (default: the 99 % rule
    for a 1e-3 BER with ten errors).
    """
    if scheme.kind is SchemeKind.UNWATERMARKED:
        raise ValueError("unwatermarked packets carry no P-bit")
    if max_bits is None:
        max_bits = required_bits(TARGET_BER, 0.99, errors=10)
    rng = np.random.default_rng([int(seed), 0x5EC])
    if fading.kind is FadingKind.SINUSOIDAL:
        fading = Fading.sinusoidal(fading.rate_hz, fading.depth_db, rng.uniform(0, 2 * np.pi))
    n0 = packet_energy(scheme, cfg) / 10 ** (ebno_db / 10)
    L = cfg.packet_len
    nb = cfg.symbols_per_packet * cfg.bits_per_symbol
    sent, energies, errors, n, t = [], [], 0, 0, 0
    pam = scheme.kind is SchemeKind.PAM_FULLBAND
    while n < max_bits and errors < max_errors:
        B = min(batch, max_bits - n)
        pb = rng.integers(0, 2, B, dtype=np.uint8)
        x = watermark_packets(scheme, cfg, rng.integers(0, 2, (B, nb), dtype=np.uint8), pb)
        env = fading.envelope_db(t, B * L, cfg.sample_rate_hz, seed).reshape(B, L)
        y = x * 10 ** (env / 20) + awgn(B * L, n0, rng).reshape(B, L)
        t += B * L
        if pam:
            body = y[:, cfg.preamble_len:]
            energies.append(np.mean(np.abs(body) ** 2, axis=1))
            sent.append(pb)
            s = np.concatenate(sent)
            errors = int(np.sum(pam_decide(np.concatenate(energies), pam_half_window) != s))
        else:
            dec = (_chip_scores(y, scheme, cfg) > 0).astype(np.uint8)
            errors += int(np.sum(dec != pb))
        n += B
    return BerPoint(float(ebno_db), errors, n)


def pseudonym_ber_curve(scheme, cfg, grid, *, seed=0, stop_below: float | None = TARGET_BER,
                        progress=None, **kw) -> list[BerPoint]:
    """Ascending sweep.  With ``stop_below`` set the sweep ends at the first point
    whose BER is below it, which is all a crossing estimate needs."""
    out = []
    for i, e in enumerate(sorted(grid)):
        p = simulate_pseudonym_ber(scheme, cfg, e, seed=int(seed) * 1000 + i, **kw)
        out.append(p)
        if progress:
            progress(f"{scheme.label} {e:g} dB ber={p.ber:.3g} n={p.n_bits}")
        if stop_below is not None and p.ber < stop_below:
            break
    return out


def snr_to_pseudonym_ebno(cfg: OfdmConfig, snr_db: float) -> float:
    """Per-sample SNR to P-bit Eb/N0 (one P-bit per packet)."""
    return snr_db + 10 * math.log10(cfg.packet_len)


# --- data BER


def data_bit_energy(scheme: WatermarkScheme, cfg: OfdmConfig) -> float:
    ns = cfg.symbols_per_packet
    if scheme.kind in (SchemeKind.STOPSEC, SchemeKind.UNWATERMARKED):
        return 0.5
    g2 = 0.5 * (np.mean(gains_for_pbit(scheme, 0, ns) ** 2) + np.mean(gains_for_pbit(scheme, 1, ns) ** 2))
    return 0.5 * float(g2)


def simulate_data_ber(scheme: WatermarkScheme, cfg: OfdmConfig, ebno_db: float, *, seed=0,
                      n_bits: int | None = None, p_floor: float = 1e-5,
                      min_packets: int = 16) -> BerPoint:
    """Data-stream BER through the full receive chain (sync, pilot equalizer, demap).

    The random stream (payload, P-bits, noise) depends only on ``seed`` and the
    point, so schemes that leave the data bins untouched give identical counts.
    """
    if n_bits is None:
        p = max(float(qpsk_ber_theory(ebno_db)), p_floor)
        n_bits = required_bits(p, 0.99, errors=10)
    rng = np.random.default_rng([int(seed), 0xDA7A, int(round(ebno_db * 1000)) & 0xFFFFFFFF])
    n0 = data_bit_energy(scheme, cfg) / 10 ** (ebno_db / 10)
    nb = cfg.symbols_per_packet * cfg.bits_per_symbol
    # whole-packet gain changes (PAM) make packets the unit of variance
    n_pkt = max(-(-n_bits // nb), min_packets)
    errors = 0
    tail = cfg.symbol_len
    for _ in range(n_pkt):
        bits = rng.integers(0, 2, (1, nb), dtype=np.uint8)
        pb = rng.integers(0, 2, 1, dtype=np.uint8)
        x = watermark_packets(scheme, cfg, bits, pb)[0]
        x = np.concatenate([x, np.zeros(tail, dtype=np.complex128)])
        y = x + awgn(x.size, n0, rng)
        try:
            rx = demodulate_packet(cfg, IqBlock(y, cfg.sample_rate_hz, "ber")).bits
            errors += int(np.sum(rx != bits[0]))
        except SyncError:
            errors += nb // 2  # a lost packet costs half its bits on average
    return BerPoint(float(ebno_db), errors, n_pkt * nb)


def data_ber_curve(scheme, cfg, grid, *, seed=0, progress=None, **kw) -> list[BerPoint]:
    out = []
    for e in sorted(grid):
        p = simulate_data_ber(scheme, cfg, e, seed=seed, **kw)
        out.append(p)
        if progress:
            progress(f"data {scheme.label} {e:g} dB ber={p.ber:.3g} n={p.n_bits}")
    return out


def write_ber_csv(path, points) -> None:
    with open(path, "w") as f:
        f.write(BER_HEADER + "\n")
        for p in points:
            f.write(p.row() + "\n")
