"""PU receive chain: preamble search, flywheel tracking, chip energies, P-bits, frames.

The detector is a single stateful consumer of one sample stream.  In SEARCH
mode it slides a FIFO of ``packet_len + preamble_len - 1`` samples and fires
when the HTSTF correlation peak clears ``factor * median``.  A fire locks the
detector to that transmitter's packet grid (packets are back to back), after
which each predicted packet start is only *confirmed* with a lower factor over
a +/-2 sample window.  Bits from unconfirmed slots are held and committed only
when a later slot confirms; more than ``max_misses`` consecutive misses drop
the lock and clear the P-bit FIFO.
"""
from __future__ import annotations

import csv
import logging
import queue
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
from scipy import signal

from .db import InterferenceReport
from .frame import FRAME_LEN, FRAME_PREAMBLE, DecodeStatus, DecodeVerdict, frame_decode
from .ofdm import IqBlock, OfdmConfig, build_htstf_preamble, time_to_symbols
from .watermark import ChipCode, get_code

log = logging.getLogger(__name__)

MEDIAN_FLOOR = 1e-12


class MisalignmentError(ValueError):
    pass


class BackPressureError(RuntimeError):
    """The report sink refused a report; it is attached as ``.report``."""

    def __init__(self, report):
        super().__init__("report sink stalled")
        self.report = report


@dataclass(frozen=True)
class ThresholdAdapt:
    up_step: float = 1.1
    down_step: float = 0.97
    min: float = 3.0
    max: float = 8.0
    quiet_windows: int = 50

    def __post_init__(self):
        if not 1 < self.min <= 4.5 <= self.max:
            raise ValueError("threshold bounds must satisfy 1 < min <= 4.5 <= max")
        if self.up_step < 1 or not 0 < self.down_step <= 1:
            raise ValueError("up_step must be >= 1 and down_step in (0, 1]")


@dataclass(frozen=True)
class DetectorConfig:
    cfg: OfdmConfig = field(default_factory=OfdmConfig.for_fft)
    code: ChipCode = field(default_factory=lambda: get_code("MSEQ15"))
    threshold_factor_init: float = 4.5
    adapt: ThresholdAdapt = field(default_factory=ThresholdAdapt)
    fifo_len_samples: int = 0  # 0 -> packet_len + preamble_len - 1
    n_pseudonym_subcarriers: int = 1
    channel_id: str = "ch0"
    track_factor: float = 2.5
    track_tolerance: int = 2
    max_misses: int = 3
    lookback_packets: int = FRAME_LEN - 1
    relock_bits: int = 3 * FRAME_LEN
    select_candidates: int = 3
    select_packets: int = 2

    def __post_init__(self):
        a = self.adapt
        if not a.min <= self.threshold_factor_init <= a.max:
            raise ValueError("initial threshold factor outside adaptation bounds")
        if self.fifo_len and self.fifo_len < self.cfg.preamble_len + self.cfg.symbol_len:
            raise ValueError("FIFO must hold the preamble plus one symbol")
        if self.code.covered_symbols > self.cfg.symbols_per_packet:
            raise ValueError("chip code does not fit in a packet")

    @property
    def fifo_len(self) -> int:
        return self.fifo_len_samples or self.cfg.packet_len + self.cfg.preamble_len - 1


@dataclass(frozen=True)
class DetectionEvent:
    packet_start_sample: int
    peak_to_median: float
    timestamp: float


@dataclass
class DetectorState:
    factor: float
    quiet: int = 0
    fires: int = 0
    windows: int = 0

    @classmethod
    def initial(cls, dcfg: DetectorConfig) -> "DetectorState":
        return cls(dcfg.threshold_factor_init)

    def raise_bar(self, a: ThresholdAdapt):
        self.factor = min(self.factor * a.up_step, a.max)

    def lower_bar(self, a: ThresholdAdapt):
        self.factor = max(self.factor * a.down_step, a.min)


@dataclass
class PBitStream:
    bits: list = field(default_factory=list)
    per_bit_correlation: list = field(default_factory=list)
    end_samples: list = field(default_factory=list)

    def append(self, bit: int, score: float, end_sample: int = 0):
        self.bits.append(int(bit))
        self.per_bit_correlation.append(float(score))
        self.end_samples.append(int(end_sample))

    def drop(self, n: int):
        del self.bits[:n], self.per_bit_correlation[:n], self.end_samples[:n]

    def clear(self):
        self.drop(len(self.bits))

    def __len__(self):
        return len(self.bits)

    @classmethod
    def from_bits(cls, bits) -> "PBitStream":
        s = cls()
        for b in bits:
            s.append(int(b), 0.0)
        return s


# --- preamble detection


def _htstf(cfg: OfdmConfig) -> np.ndarray:
    return build_htstf_preamble(cfg).samples


def preamble_correlation(cfg: OfdmConfig, x: np.ndarray) -> np.ndarray:
    p = _htstf(cfg)
    if len(x) < len(p):
        return np.zeros(0)
    return np.abs(signal.correlate(x, p, mode="valid", method="fft"))


def detect_packet_start(window: IqBlock, dcfg: DetectorConfig,
                        state: DetectorState) -> Optional[DetectionEvent]:
    """Peak-to-median test over one FIFO window.  Lag ``k`` means a packet
    starting at ``window.start_sample + k``.  Updates the adaptive state."""
    cfg = dcfg.cfg
    if len(window) < cfg.preamble_len + cfg.symbol_len:
        raise MisalignmentError("window shorter than preamble plus one symbol")
    c = preamble_correlation(cfg, window.samples)
    state.windows += 1
    med = float(np.median(c))
    lag = int(np.argmax(c))
    ratio = float(c[lag] / med) if med >= MEDIAN_FLOOR else 0.0
    if med < MEDIAN_FLOOR or ratio < state.factor:
        state.quiet += 1
        if state.quiet >= dcfg.adapt.quiet_windows:
            state.lower_bar(dcfg.adapt)
            state.quiet = 0
        return None
    state.quiet = 0
    state.fires += 1
    start = window.start_sample + lag
    return DetectionEvent(start, ratio, start / cfg.sample_rate_hz)


def _confirm(dcfg: DetectorConfig, x: np.ndarray, k: int) -> tuple[bool, int, float]:
    """Track test at predicted lag ``k`` of ``x``; returns (ok, refined_lag, ratio)."""
    tol = dcfg.track_tolerance
    c = preamble_correlation(dcfg.cfg, x)
    med = float(np.median(c))
    lo, hi = max(k - tol, 0), min(k + tol + 1, c.size)
    if hi <= lo or med < MEDIAN_FLOOR:
        return False, k, 0.0
    j = lo + int(np.argmax(c[lo:hi]))
    ratio = float(c[j] / med)
    return ratio >= dcfg.track_factor, j, ratio


# --- P-bit decoding


def extract_chip_energies(rx_packet: IqBlock, dcfg: DetectorConfig, backoff: int | None = None) -> np.ndarray:
    """Average |pseudonym bin| per chip.  ``rx_packet`` starts at the packet's
    first preamble sample; the FFT window is moved ``backoff`` samples (default
    half the CP) into the cyclic prefix so small timing errors do no harm."""
    cfg, code = dcfg.cfg, dcfg.code
    cp = cfg.cyclic_prefix_len
    b = cp // 2 if backoff is None else backoff
    n_sym = code.covered_symbols
    x = rx_packet.samples
    s0 = cfg.preamble_len - b
    if s0 < 0 or len(x) < s0 + n_sym * cfg.symbol_len:
        raise MisalignmentError(
            f"need {n_sym} symbols after the preamble, block has {len(x)} samples")
    Y = time_to_symbols(cfg, x[s0:], n_sym)
    bins = cfg.bins(cfg.pseudonym_indices(dcfg.n_pseudonym_subcarriers))
    mags = np.abs(Y[:, bins]).mean(axis=1)
    return mags.reshape(code.length, code.symbols_per_chip).mean(axis=1)


def decide_pbit(energies, code: ChipCode) -> tuple[int, float]:
    """Correlate mean-removed chip energies with the bit-1 energy signature.

    The bit-1 code keeps the carrier off where ``chips_bit1`` is 1, so its
    expected energy pattern is ``1 - chips_bit1``.  Score exactly 0 -> bit 0.
    """
    e = np.asarray(energies, dtype=float)
    if e.size != code.length:
        raise ValueError(f"expected {code.length} chip energies, got {e.size}")
    score = float(np.dot(e - e.mean(), code.signature()))
    return (1 if score > 0 else 0), abs(score)


# --- frame assembly


def _preamble_at(bits, i: int) -> bool:
    return list(bits[i:i + 7]) == FRAME_PREAMBLE.tolist()


def assemble_frames(stream) -> list[DecodeVerdict]:
    """Slide a 38-bit window; decode wherever the preamble matches.

    A (31,26) Hamming code is perfect, so any window with a matching preamble
    decodes to *something*.  Overlapping candidates are ranked: a clean decode
    (OK) beats a corrected one, and a frame that abuts another valid frame or
    the end of the stream beats one that does not.  This is what lets a random
    prefix be skipped instead of swallowing the real frame.
    """
    bits = list(stream.bits if isinstance(stream, PBitStream) else stream)
    n = len(bits)
    cache: dict[int, Optional[DecodeVerdict]] = {}

    def cand(i):
        if i not in cache:
            v = None
            if 0 <= i and i + FRAME_LEN <= n and _preamble_at(bits, i):
                v = frame_decode(bits[i:i + FRAME_LEN])
                v = v if v.valid else None
            cache[i] = v
        return cache[i]

    def score(i):
        v = cand(i)
        sc = 2 if v.status is DecodeStatus.OK else 1
        if i + FRAME_LEN == n or cand(i + FRAME_LEN) or cand(i - FRAME_LEN):
            sc += 2
        return sc

    out = []
    i = 0
    while i + FRAME_LEN <= n:
        if cand(i) is None:
            i += 1
            continue
        si = score(i)
        if any(cand(j) and score(j) > si for j in range(i + 1, min(i + FRAME_LEN, n - FRAME_LEN + 1))):
            i += 1
            continue
        out.append(cand(i))
        i += FRAME_LEN
    return out


class FrameAssembler:
    """Streaming counterpart of :func:`assemble_frames`.

    Slides bit by bit until the first valid frame, then checks only at the
    38-bit boundaries that follow it (transmitters send frames back to back).
    Frames are emitted as soon as they validate.  If a corrected frame is
    followed by a failed boundary it was likely an alias, so the 37 positions
    after it are searched for a clean frame first.  Two consecutive failed
    boundaries fall back to sliding.
    """

    def __init__(self):
        self.stream = PBitStream()
        self.aligned = False
        self._fails = 0
        self._last = None  # (verdict, bits, end_samples) of the last emitted frame
        self.verdicts: list[DecodeVerdict] = []

    def reset(self):
        self.stream.clear()
        self.aligned = False
        self._fails = 0
        self._last = None

    def _recover(self):
        if self._last is None or self._last[0].status is not DecodeStatus.CORRECTED_1BIT:
            return None
        s = self.stream
        bits = self._last[1] + s.bits[:FRAME_LEN]
        ends = self._last[2] + s.end_samples[:FRAME_LEN]
        for k in range(1, FRAME_LEN):
            if not _preamble_at(bits, k):
                continue
            v = frame_decode(bits[k:k + FRAME_LEN])
            if v.status is DecodeStatus.OK:
                self._last = (v, bits[k:k + FRAME_LEN], ends[k:k + FRAME_LEN])
                s.drop(k)
                return v, ends[k + FRAME_LEN - 1]
        return None

    def push(self, bit: int, score: float, end_sample: int) -> list[tuple[DecodeVerdict, int]]:
        s = self.stream
        s.append(bit, score, end_sample)
        out = []
        while True:
            if not self.aligned and len(s) >= 7 and not _preamble_at(s.bits, 0):
                s.drop(1)
                continue
            if len(s) < FRAME_LEN:
                break
            v = frame_decode(s.bits[:FRAME_LEN])
            self.verdicts.append(v)
            if v.valid:
                out.append((v, s.end_samples[FRAME_LEN - 1]))
                self._last = (v, s.bits[:FRAME_LEN], s.end_samples[:FRAME_LEN])
                s.drop(FRAME_LEN)
                self.aligned = True
                self._fails = 0
            elif self.aligned:
                rec = self._recover()
                if rec is not None:
                    out.append(rec)
                    self._fails = 0
                    continue
                self._last = None
                self._fails += 1
                if self._fails >= 2:
                    self.aligned = False
                    self._fails = 0
                    s.drop(1)
                else:
                    s.drop(FRAME_LEN)
            else:
                s.drop(1)
        return out


# --- the streaming detector


class PuDetector:
    """Feed consecutive :class:`IqBlock` chunks; collect :class:`InterferenceReport`.

    ``sink`` is optional; it is called with each report and may return False
    or raise :class:`queue.Full` to signal back-pressure.
    """

    def __init__(self, dcfg: DetectorConfig, sink: Callable | None = None, chip_dump=None):
        self.dcfg = dcfg
        self.sink = sink
        self.state = DetectorState.initial(dcfg)
        self.assembler = FrameAssembler()
        self.events: list[DetectionEvent] = []
        self.reports: list[InterferenceReport] = []
        self._dump = csv.writer(chip_dump) if chip_dump is not None else None
        if self._dump is not None:
            self._dump.writerow(["packet_idx", "chip_idx", "energy"])
        self._n_packets = 0
        self._buf = np.zeros(0, dtype=np.complex128)
        self._buf0 = 0
        self._started = False
        self._pos = 0  # next search window start (absolute)
        self._locked = False
        self._next = 0  # predicted start of the next packet while locked
        self._misses = 0
        self._confirms = 0
        self._pending: list[tuple[int, float, int]] = []
        self._bits_since_frame = 0
        self._lock_frames = 0

    @property
    def locked(self) -> bool:
        return self._locked

    @property
    def factor(self) -> float:
        return self.state.factor

    # buffer helpers
    @property
    def _end(self) -> int:
        return self._buf0 + len(self._buf)

    def _slice(self, a: int, b: int) -> np.ndarray:
        return self._buf[a - self._buf0: b - self._buf0]

    def _trim(self):
        c = self.dcfg.cfg
        keep_from = (self._next if self._locked else self._pos) - self.dcfg.track_tolerance
        keep_from -= self.dcfg.lookback_packets * c.packet_len
        cut = keep_from - self._buf0
        if cut > 0:
            self._buf = self._buf[cut:]
            self._buf0 += cut

    def feed(self, block: IqBlock) -> list[InterferenceReport]:
        if not self._started:
            self._buf0 = self._pos = block.start_sample
            self._started = True
        if block.start_sample != self._end:
            raise MisalignmentError(
                f"chunk starts at {block.start_sample}, expected {self._end}")
        self._buf = np.concatenate([self._buf, block.samples])
        new = []
        while self._step(new):
            pass
        self._trim()
        return new

    def _step(self, new) -> bool:
        d, c = self.dcfg, self.dcfg.cfg
        if self._locked:
            s = self._next
            a = s - d.track_tolerance
            if a + d.fifo_len > self._end:
                return False
            ok, j, _ = _confirm(d, self._slice(a, a + d.fifo_len), d.track_tolerance)
            if ok:
                s = a + j
            self._slot(s, ok, new)
            if self._locked:
                self._next = s + c.packet_len
            return True
        # a fire may point at the last lag; keep headroom for candidate scoring
        if self._pos + d.fifo_len + (1 + d.select_packets) * c.packet_len > self._end:
            return False
        w = IqBlock(self._slice(self._pos, self._pos + d.fifo_len), c.sample_rate_hz,
                    "fifo", self._pos)
        ev = detect_packet_start(w, d, self.state)
        if ev is None:
            self._pos += c.packet_len
            return True
        self.events.append(ev)
        log.debug("fire at %d (ratio %.2f, factor %.2f)", ev.packet_start_sample,
                  ev.peak_to_median, self.state.factor)
        self._acquire(self._select(w, ev.packet_start_sample), new)
        return True

    def _select(self, w: IqBlock, fired: int) -> int:
        """Pick the transmitter to follow among the strongest peaks in the fired
        window by averaging their track ratios over the next few packets."""
        d, c = self.dcfg, self.dcfg.cfg
        if d.select_candidates <= 1 or d.select_packets < 1:
            return fired
        corr = preamble_correlation(c, w.samples)
        floor = d.track_factor * float(np.median(corr))
        cands = [fired]
        for lag in np.argsort(corr)[::-1]:
            if len(cands) >= d.select_candidates or corr[lag] < floor:
                break
            s = w.start_sample + int(lag)
            if all(abs(s - x) >= c.symbol_len for x in cands):
                cands.append(s)
        if len(cands) == 1:
            return fired
        best, best_score = fired, -1.0
        for s0 in cands:
            score = 0.0
            for m in range(d.select_packets + 1):
                a = s0 + m * c.packet_len - d.track_tolerance
                score += _confirm(d, self._slice(a, a + d.fifo_len), d.track_tolerance)[2]
            if score > best_score:
                best, best_score = s0, score
        return best

    def _acquire(self, start: int, new):
        d, c = self.dcfg, self.dcfg.cfg
        self._locked = True
        self._misses = self._confirms = 0
        self._bits_since_frame = 0
        self._lock_frames = 0
        self._pending.clear()
        self.assembler.reset()
        # walk back over earlier slots still in the buffer
        first, misses, j = start, 0, 1
        while j <= d.lookback_packets:
            s = start - j * c.packet_len
            a = s - d.track_tolerance
            if a < self._buf0:
                break
            ok, _, _ = _confirm(d, self._slice(a, a + d.fifo_len), d.track_tolerance)
            if ok:
                first, misses = s, 0
            else:
                misses += 1
                if misses > d.max_misses:
                    break
            j += 1
        for s in range(first, start, c.packet_len):
            self._emit_bit(s, new)
        self._emit_bit(start, new)
        self._confirms += 1
        self._next = start + c.packet_len

    def _slot(self, s: int, ok: bool, new):
        d = self.dcfg
        bit = self._bit_at(s)
        self._pending.append(bit)
        if ok:
            self._confirms += 1
            self._misses = 0
            for b in self._pending:
                self._commit(*b, new)
            self._pending.clear()
        else:
            self._misses += 1
            if self._misses > d.max_misses:
                self._unlock(s + d.cfg.packet_len)
                return
        if self._bits_since_frame >= d.relock_bits:
            self._unlock(s + d.cfg.packet_len)

    def _unlock(self, resume: int):
        a = self.dcfg.adapt
        if self._lock_frames == 0 and self._confirms <= 1:
            self.state.raise_bar(a)  # most likely a false fire
        self._locked = False
        self._pending.clear()
        self.assembler.reset()
        self._pos = resume

    def _bit_at(self, s: int) -> tuple[int, float, int]:
        c = self.dcfg.cfg
        e = extract_chip_energies(IqBlock(self._slice(s, s + c.packet_len), c.sample_rate_hz), self.dcfg)
        if self._dump is not None:
            for i, v in enumerate(e):
                self._dump.writerow([self._n_packets, i, f"{v:.9g}"])
        self._n_packets += 1
        bit, score = decide_pbit(e, self.dcfg.code)
        return bit, score, s + c.packet_len

    def _emit_bit(self, s: int, new):
        self._commit(*self._bit_at(s), new)

    def _commit(self, bit, score, end, new):
        self._bits_since_frame += 1
        for v, end_sample in self.assembler.push(bit, score, end):
            self._bits_since_frame = 0
            self._lock_frames += 1
            r = InterferenceReport(v.pseudonym, end_sample / self.dcfg.cfg.sample_rate_hz,
                                   self.dcfg.channel_id)
            self.reports.append(r)
            new.append(r)
            self._deliver(r)

    def _deliver(self, r):
        if self.sink is None:
            return
        try:
            ok = self.sink(r)
        except queue.Full:
            ok = False
        if ok is False:
            raise BackPressureError(r)


def run_detector(rx_stream: Iterable[IqBlock], dcfg: DetectorConfig, report_sink=None):
    """Generator over reports as they are validated."""
    det = PuDetector(dcfg, report_sink)
    for blk in rx_stream:
        yield from det.feed(blk)
