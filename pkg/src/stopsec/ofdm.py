"""OFDM host signal: subcarrier layout, QPSK mapping, training preamble, modem.

Subcarriers are addressed by *centered* index ``-N/2 .. N/2-1``; FFT bin is
``index % N``.  Transforms use ``norm="ortho"`` so symbol energy is the same
in time and frequency.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import signal

# Table-1 rows: FFT size -> sample rate (Hz) == occupied bandwidth.
BANDWIDTH_BY_FFT = {64: 2e6, 128: 5e6, 256: 10e6}

HTSTF_SYMBOLS = 2
_HTSTF_SEED = 0x5354


class SizeMismatchError(ValueError):
    pass


class SyncError(RuntimeError):
    """Preamble correlation did not clear the sync threshold."""


@dataclass(frozen=True)
class OfdmConfig:
    fft_size: int = 64
    n_data: int = 48
    n_pilot: int = 4
    n_guard: int = 11
    pseudonym_subcarrier_index: int = 27
    symbols_per_packet: int = 100
    cyclic_prefix_len: int = 8
    sample_rate_hz: float = 2e6

    def __post_init__(self):
        if self.fft_size not in BANDWIDTH_BY_FFT:
            raise ValueError(f"fft_size must be one of {sorted(BANDWIDTH_BY_FFT)}")
        if self.n_data + self.n_pilot + self.n_guard + 1 != self.fft_size:
            raise ValueError("n_data + n_pilot + n_guard + 1 must equal fft_size")
        half = self.used_half_width
        if 2 * half != self.n_data + self.n_pilot:
            raise ValueError("data and pilot subcarriers must fill +/-used_half_width")
        if self.pseudonym_subcarrier_index not in self.guard_indices(include_pseudonym=True):
            raise ValueError("pseudonym subcarrier must sit in the guard band")
        if self.symbols_per_packet < 1 or self.cyclic_prefix_len < 0:
            raise ValueError("bad packet geometry")

    @classmethod
    def for_fft(cls, fft_size: int = 64, **overrides) -> "OfdmConfig":
        """Default layout: 52/64 of the band used, 4 pilots, DC null, rest guard."""
        if fft_size not in BANDWIDTH_BY_FFT:
            raise ValueError(f"fft_size must be one of {sorted(BANDWIDTH_BY_FFT)}")
        half = 26 * fft_size // 64
        n_pilot = 4
        kw = dict(
            fft_size=fft_size,
            n_data=2 * half - n_pilot,
            n_pilot=n_pilot,
            n_guard=fft_size - 2 * half - 1,
            pseudonym_subcarrier_index=half + 1,
            cyclic_prefix_len=math.ceil(fft_size / 8),
            sample_rate_hz=BANDWIDTH_BY_FFT[fft_size],
        )
        kw.update(overrides)
        return cls(**kw)

    @property
    def used_half_width(self) -> int:
        return (self.n_data + self.n_pilot) // 2

    @property
    def symbol_len(self) -> int:
        return self.fft_size + self.cyclic_prefix_len

    @property
    def preamble_len(self) -> int:
        return HTSTF_SYMBOLS * self.symbol_len

    @property
    def packet_len(self) -> int:
        return self.preamble_len + self.symbols_per_packet * self.symbol_len

    @property
    def packet_duration_s(self) -> float:
        return self.packet_len / self.sample_rate_hz

    @property
    def subcarrier_spacing_hz(self) -> float:
        return self.sample_rate_hz / self.fft_size

    @property
    def bits_per_symbol(self) -> int:
        return 2 * self.n_data

    def used_indices(self) -> np.ndarray:
        h = self.used_half_width
        return np.r_[np.arange(-h, 0), np.arange(1, h + 1)]

    def pilot_indices(self) -> np.ndarray:
        # +/-7, +/-21 at 64 points, scaled with the band
        s = self.fft_size // 64
        return np.array([-21, -7, 7, 21]) * s

    def data_indices(self) -> np.ndarray:
        used = self.used_indices()
        return used[~np.isin(used, self.pilot_indices())]

    def guard_indices(self, include_pseudonym: bool = False) -> np.ndarray:
        n = self.fft_size
        allc = np.arange(-n // 2, n // 2)
        g = allc[(np.abs(allc) > self.used_half_width) | (allc == 0)]
        if not include_pseudonym:
            g = g[g != self.pseudonym_subcarrier_index]
        return g

    def pseudonym_indices(self, n: int = 1) -> np.ndarray:
        """First pseudonym subcarrier plus ``n - 1`` adjacent upper guards."""
        if not 1 <= n <= 3:
            raise ValueError("1 to 3 pseudonym subcarriers supported")
        idx = self.pseudonym_subcarrier_index + np.arange(n)
        if idx[-1] >= self.fft_size // 2:
            raise ValueError("not enough upper guard bins")
        return idx

    def bins(self, indices) -> np.ndarray:
        return np.asarray(indices) % self.fft_size

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class IqBlock:
    samples: np.ndarray
    sample_rate_hz: float
    origin_tag: str = ""
    start_sample: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)

    def __len__(self):
        return len(self.samples)

    @property
    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2)) if len(self.samples) else 0.0

    def check(self):
        if len(self.samples) == 0 or not np.all(np.isfinite(self.samples)):
            raise ValueError(f"IqBlock {self.origin_tag!r} must be finite and non-empty")
        return self


@dataclass
class DataPayload:
    bits: np.ndarray
    modulation: str = "QPSK"

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)

    @classmethod
    def random(cls, cfg: OfdmConfig, rng: np.random.Generator, n_symbols: int | None = None):
        n = cfg.symbols_per_packet if n_symbols is None else n_symbols
        return cls(rng.integers(0, 2, n * cfg.bits_per_symbol, dtype=np.uint8))


def qpsk_map(bits: np.ndarray) -> np.ndarray:
    b = np.asarray(bits, dtype=np.int8).reshape(-1, 2)
    return ((1 - 2 * b[:, 0]) + 1j * (1 - 2 * b[:, 1])) / np.sqrt(2)


def qpsk_demap(symbols: np.ndarray) -> np.ndarray:
    s = np.asarray(symbols).ravel()
    out = np.empty((s.size, 2), dtype=np.uint8)
    out[:, 0] = s.real < 0
    out[:, 1] = s.imag < 0
    return out.ravel()


def _pilot_values(cfg: OfdmConfig) -> np.ndarray:
    return np.array([1.0, 1.0, 1.0, -1.0])


def _htstf_grid(cfg: OfdmConfig) -> np.ndarray:
    rng = np.random.default_rng([_HTSTF_SEED, cfg.fft_size])
    grid = np.zeros((HTSTF_SYMBOLS, cfg.fft_size), dtype=np.complex128)
    used = cfg.bins(cfg.used_indices())
    b = rng.integers(0, 2, (HTSTF_SYMBOLS, used.size * 2))
    for k in range(HTSTF_SYMBOLS):
        grid[k, used] = qpsk_map(b[k])
    return grid


def symbols_to_time(cfg: OfdmConfig, grid: np.ndarray) -> np.ndarray:
    """(…, n_sym, N) frequency grid -> (…, n_sym * (N + cp)) samples with CP."""
    x = np.fft.ifft(grid, axis=-1, norm="ortho")
    cp = cfg.cyclic_prefix_len
    x = np.concatenate([x[..., cfg.fft_size - cp:], x], axis=-1)
    return x.reshape(*x.shape[:-2], -1)


def time_to_symbols(cfg: OfdmConfig, x: np.ndarray, n_symbols: int) -> np.ndarray:
    """Inverse of :func:`symbols_to_time` for aligned samples (CP dropped)."""
    seg = np.asarray(x)[..., : n_symbols * cfg.symbol_len]
    seg = seg.reshape(*seg.shape[:-1], n_symbols, cfg.symbol_len)[..., cfg.cyclic_prefix_len:]
    return np.fft.fft(seg, axis=-1, norm="ortho")


def build_htstf_preamble(cfg: OfdmConfig) -> IqBlock:
    """Known training field: two distinct pseudo-random QPSK symbols on every used bin."""
    return IqBlock(symbols_to_time(cfg, _htstf_grid(cfg)), cfg.sample_rate_hz, "htstf")


def packet_spectrum(cfg: OfdmConfig, payload: DataPayload, pseudonym_gains,
                    n_pseudonym_subcarriers: int = 1) -> np.ndarray:
    """Frequency grid (symbols_per_packet, N) of the packet body."""
    bits = payload.bits
    need = cfg.symbols_per_packet * cfg.bits_per_symbol
    if bits.size != need:
        raise SizeMismatchError(f"payload must carry {need} bits, got {bits.size}")
    return packets_spectrum(cfg, bits[None], np.asarray(pseudonym_gains, dtype=float)[None],
                            n_pseudonym_subcarriers)[0]


def packets_spectrum(cfg: OfdmConfig, bits: np.ndarray, pseudonym_gains: np.ndarray,
                     n_pseudonym_subcarriers: int = 1) -> np.ndarray:
    """Batched :func:`packet_spectrum`: bits (B, n_bits), gains (B, n_sym) -> (B, n_sym, N)."""
    ns = cfg.symbols_per_packet
    gains = np.asarray(pseudonym_gains, dtype=float)
    bits = np.asarray(bits, dtype=np.uint8)
    if gains.ndim != 2 or gains.shape[1] != ns:
        raise SizeMismatchError(f"need {ns} pseudonym gains per packet, got {gains.shape}")
    if np.any(gains < 0):
        raise ValueError("pseudonym gains must be non-negative")
    B = gains.shape[0]
    need = ns * cfg.bits_per_symbol
    if bits.shape != (B, need):
        raise SizeMismatchError(f"payload must carry {need} bits per packet, got {bits.shape}")
    grid = np.zeros((B, ns, cfg.fft_size), dtype=np.complex128)
    grid[:, :, cfg.bins(cfg.data_indices())] = qpsk_map(bits).reshape(B, ns, cfg.n_data)
    grid[:, :, cfg.bins(cfg.pilot_indices())] = _pilot_values(cfg)
    # pseudonym carrier: twice the data-subcarrier amplitude when fully on
    for b in cfg.bins(cfg.pseudonym_indices(n_pseudonym_subcarriers)):
        grid[:, :, b] = 2.0 * gains
    return grid


def modulate_packet(cfg: OfdmConfig, payload: DataPayload, pseudonym_subcarrier_gain_per_symbol,
                    n_pseudonym_subcarriers: int = 1) -> IqBlock:
    grid = packet_spectrum(cfg, payload, pseudonym_subcarrier_gain_per_symbol,
                           n_pseudonym_subcarriers)
    body = symbols_to_time(cfg, grid)
    pre = build_htstf_preamble(cfg).samples
    return IqBlock(np.concatenate([pre, body]), cfg.sample_rate_hz, "packet")


def modulate_packets(cfg: OfdmConfig, bits: np.ndarray, pseudonym_gains: np.ndarray,
                     n_pseudonym_subcarriers: int = 1) -> np.ndarray:
    """(B, packet_len) samples for B packets; row b equals ``modulate_packet`` of packet b."""
    body = symbols_to_time(cfg, packets_spectrum(cfg, bits, pseudonym_gains, n_pseudonym_subcarriers))
    pre = np.broadcast_to(build_htstf_preamble(cfg).samples, (body.shape[0], cfg.preamble_len))
    return np.concatenate([pre, body], axis=1)


def correlate_preamble(cfg: OfdmConfig, x: np.ndarray) -> np.ndarray:
    """|cross-correlation| of ``x`` with the HTSTF at every full-overlap lag."""
    p = build_htstf_preamble(cfg).samples
    if len(x) < len(p):
        return np.zeros(0)
    return np.abs(signal.correlate(x, p, mode="valid", method="fft"))


def find_packet_start(cfg: OfdmConfig, x: np.ndarray, max_lag: int,
                      threshold: float = 3.0) -> tuple[int, float]:
    """Strongest preamble lag in ``[0, max_lag]`` and its peak-to-median ratio."""
    c = correlate_preamble(cfg, x[: max_lag + cfg.preamble_len])
    if c.size == 0:
        raise SyncError("block shorter than the preamble")
    med = float(np.median(c))
    lag = int(np.argmax(c))
    ratio = c[lag] / med if med > 1e-12 else 0.0
    if ratio < threshold:
        raise SyncError(f"preamble peak-to-median {ratio:.2f} below {threshold}")
    return lag, ratio


def estimate_channel(cfg: OfdmConfig, Y: np.ndarray) -> np.ndarray:
    """Least-squares single-tap estimate per used bin from pilots averaged over the packet."""
    pil = cfg.pilot_indices()
    hp = np.mean(Y[:, cfg.bins(pil)], axis=0) / _pilot_values(cfg)
    used = cfg.used_indices()
    h = np.interp(used, pil, hp.real) + 1j * np.interp(used, pil, hp.imag)
    out = np.ones(cfg.fft_size, dtype=np.complex128)
    out[cfg.bins(used)] = h
    return out


def demodulate_packet(cfg: OfdmConfig, rx: IqBlock, sync_threshold: float = 3.0) -> DataPayload:
    """Synchronize on the preamble (within one symbol), equalize with pilots, demap QPSK."""
    x = rx.samples
    lag, _ = find_packet_start(cfg, x, cfg.symbol_len, sync_threshold)
    body = x[lag + cfg.preamble_len:]
    ns = cfg.symbols_per_packet
    if len(body) < ns * cfg.symbol_len:
        raise SyncError("block ends before the packet body")
    Y = time_to_symbols(cfg, body, ns)
    h = estimate_channel(cfg, Y)
    d = cfg.bins(cfg.data_indices())
    return DataPayload(qpsk_demap(Y[:, d] / h[d]))


# --- IQ file format: little-endian interleaved float32 I/Q + one-line JSON sidecar


def write_iq(path, block: IqBlock) -> None:
    path = Path(path)
    inter = np.empty(2 * len(block.samples), dtype="<f4")
    inter[0::2] = block.samples.real
    inter[1::2] = block.samples.imag
    inter.tofile(path)
    meta = {"sample_rate_hz": block.sample_rate_hz, "origin_tag": block.origin_tag}
    Path(str(path) + ".json").write_text(json.dumps(meta) + "\n")


def read_iq(path) -> IqBlock:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 2:
        raise ValueError(f"{path}: odd number of float32 values")
    return IqBlock(raw[0::2] + 1j * raw[1::2], float(meta["sample_rate_hz"]),
                   meta.get("origin_tag", ""))


def with_symbols(cfg: OfdmConfig, n: int) -> OfdmConfig:
    return replace(cfg, symbols_per_packet=n)
