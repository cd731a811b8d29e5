"""Baseband stand-in for over-the-air propagation: flat gain, slow fading, delay, AWGN."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .ofdm import IqBlock


class DegenerateInputError(ValueError):
    pass


class FadingKind(str, enum.Enum):
    NONE = "none"
    SINUSOIDAL = "sinusoidal"
    RANDOM_WALK = "random_walk"


@dataclass(frozen=True)
class Fading:
    """Power envelope in dB.

    SINUSOIDAL: ``depth_db * sin(2*pi*rate_hz*t + phase_rad)``.
    RANDOM_WALK: Gaussian steps of ``step_db`` every ``step_samples``, clipped to
    ``+/-clamp_db``.
    """
    kind: FadingKind = FadingKind.NONE
    rate_hz: float = 0.0
    depth_db: float = 0.0
    phase_rad: float = 0.0
    step_db: float = 0.0
    step_samples: int = 72
    clamp_db: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", FadingKind(self.kind))
        if self.depth_db < 0 or self.clamp_db < 0 or self.step_db < 0:
            raise ValueError("fading depth, step and clamp must be non-negative")
        if self.step_samples < 1:
            raise ValueError("step_samples must be positive")

    @classmethod
    def sinusoidal(cls, rate_hz, depth_db, phase_rad=0.0):
        return cls(FadingKind.SINUSOIDAL, rate_hz=rate_hz, depth_db=depth_db, phase_rad=phase_rad)

    @classmethod
    def random_walk(cls, step_db, clamp_db, step_samples=72):
        return cls(FadingKind.RANDOM_WALK, step_db=step_db, clamp_db=clamp_db,
                   step_samples=step_samples)

    def envelope_db(self, n0: int, n: int, sample_rate_hz: float, seed=0) -> np.ndarray:
        if self.kind is FadingKind.NONE or n == 0:
            return np.zeros(n)
        idx = np.arange(n0, n0 + n)
        if self.kind is FadingKind.SINUSOIDAL:
            t = idx / sample_rate_hz
            return self.depth_db * np.sin(2 * np.pi * self.rate_hz * t + self.phase_rad)
        steps = idx // self.step_samples
        walk = _random_walk(int(steps[-1]) + 1, self.step_db, self.clamp_db, seed)
        return walk[steps]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "Fading":
        return cls(**d) if d else cls()


def _random_walk(n_steps: int, step_db: float, clamp_db: float, seed) -> np.ndarray:
    rng = np.random.default_rng([0xFADE, int(seed)])
    inc = rng.normal(0.0, step_db, n_steps)
    out = np.empty(n_steps)
    v = 0.0
    for i, d in enumerate(inc):
        out[i] = v
        v = min(max(v + d, -clamp_db), clamp_db)
    return out


@dataclass(frozen=True)
class LinkModel:
    gain_db: float = 0.0
    fading: Fading = field(default_factory=Fading)
    timing_offset_samples: int = 0
    phase_rad: float = 0.0
    cfo_hz: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.fading, dict):
            object.__setattr__(self, "fading", Fading.from_dict(self.fading))
        if self.timing_offset_samples < 0:
            raise ValueError("timing offset must be non-negative")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["fading"] = self.fading.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "LinkModel":
        return cls(**(d or {}))


def link_gain(link: LinkModel, n0: int, n: int, sample_rate_hz: float) -> np.ndarray:
    """Complex per-sample gain for absolute sample indices ``n0 .. n0+n-1``."""
    env_db = link.gain_db + link.fading.envelope_db(n0, n, sample_rate_hz, link.seed)
    g = 10 ** (env_db / 20) * np.exp(1j * link.phase_rad)
    if link.cfo_hz:
        g = g * np.exp(2j * np.pi * link.cfo_hz * np.arange(n0, n0 + n) / sample_rate_hz)
    return g


def propagate(tx: IqBlock, link: LinkModel, start_sample: int | None = None) -> IqBlock:
    """Apply gain, fading and delay.  ``start_sample`` is the absolute index of
    ``tx.samples[0]`` (defaults to ``tx.start_sample``) so chunked calls agree
    with a whole-block call."""
    n0 = tx.start_sample if start_sample is None else start_sample
    y = tx.samples * link_gain(link, n0, len(tx.samples), tx.sample_rate_hz)
    d = link.timing_offset_samples
    if d:
        y = np.concatenate([np.zeros(d, dtype=np.complex128), y])
    return IqBlock(y, tx.sample_rate_hz, f"{tx.origin_tag}>link", n0)


def superpose(blocks) -> IqBlock:
    """Sum ``(IqBlock, start_sample)`` pairs on a common timeline starting at the
    earliest start."""
    blocks = list(blocks)
    if not blocks:
        raise ValueError("superpose needs at least one block")
    t0 = min(s for _, s in blocks)
    t1 = max(s + len(b) for b, s in blocks)
    out = np.zeros(t1 - t0, dtype=np.complex128)
    for b, s in blocks:
        out[s - t0: s - t0 + len(b)] += b.samples
    return IqBlock(out, blocks[0][0].sample_rate_hz, "superposed", t0)


class NoiseMode(str, enum.Enum):
    SNR_DB = "snr_db"
    EBN0_DB = "ebn0_db"
    FLOOR_DB = "floor_db"
    NONE = "none"


@dataclass(frozen=True)
class NoiseModel:
    """SNR_DB / EBN0_DB scale noise to the measured power of the clean signal;
    FLOOR_DB fixes the absolute noise power (scenario runs); NONE is noiseless."""
    mode: NoiseMode = NoiseMode.SNR_DB
    value: float = 0.0
    bit_rate_hz: float = 0.0
    bandwidth_hz: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", NoiseMode(self.mode))
        if self.mode is NoiseMode.EBN0_DB and not (self.bit_rate_hz > 0 and self.bandwidth_hz > 0):
            raise ValueError("Eb/N0 mode needs bit_rate_hz and bandwidth_hz")

    @classmethod
    def snr(cls, snr_db, seed=0):
        return cls(NoiseMode.SNR_DB, snr_db, seed=seed)

    @classmethod
    def ebn0(cls, ebn0_db, bit_rate_hz, bandwidth_hz, seed=0):
        return cls(NoiseMode.EBN0_DB, ebn0_db, bit_rate_hz, bandwidth_hz, seed)

    @classmethod
    def floor(cls, power_db=0.0, seed=0):
        return cls(NoiseMode.FLOOR_DB, power_db, seed=seed)

    @classmethod
    def none(cls):
        return cls(NoiseMode.NONE)

    @property
    def snr_db(self) -> float:
        if self.mode is NoiseMode.EBN0_DB:
            return self.value + 10 * np.log10(self.bit_rate_hz / self.bandwidth_hz)
        return self.value

    def noise_power(self, signal_power: float) -> float:
        if self.mode is NoiseMode.NONE:
            return 0.0
        if self.mode is NoiseMode.FLOOR_DB:
            return 10 ** (self.value / 10)
        if signal_power <= 0:
            raise DegenerateInputError("cannot scale noise to a zero-power signal")
        return signal_power / 10 ** (self.snr_db / 10)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "NoiseModel":
        return cls(**d) if d else cls.floor()


def awgn(n: int, power: float, rng: np.random.Generator) -> np.ndarray:
    """Circular complex Gaussian noise with E|w|^2 = power."""
    w = rng.standard_normal((2, n))
    return np.sqrt(power / 2) * (w[0] + 1j * w[1])


def add_noise(sig: IqBlock, noise: NoiseModel, rng: np.random.Generator | None = None) -> IqBlock:
    if len(sig.samples) == 0:
        raise DegenerateInputError("empty signal")
    rng = np.random.default_rng(noise.seed) if rng is None else rng
    p = noise.noise_power(sig.power)
    y = sig.samples + awgn(len(sig.samples), p, rng)
    return IqBlock(y, sig.sample_rate_hz, f"{sig.origin_tag}+awgn", sig.start_sample)


def measure_snr_db(rx_active: np.ndarray, rx_idle: np.ndarray) -> float:
    """SNR from received samples while transmitting and while idle."""
    pn = np.mean(np.abs(rx_idle) ** 2)
    ps = np.mean(np.abs(rx_active) ** 2) - pn
    return float(10 * np.log10(ps / pn))
