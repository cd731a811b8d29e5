"""Closed-loop discrete-event simulation: SUs transmit watermarked packets, the
PU detects and reports, SUs poll the database and vacate the channel.

Time advances in chunks of one packet of samples.  Before a chunk is
synthesized, every scheduled event (database writes becoming visible, SU
queries, stops) that falls inside it is processed in time order, so a stop
lands on its exact sample.
"""
from __future__ import annotations

import enum
import heapq
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .channel import Fading, LinkModel, NoiseMode, NoiseModel, awgn, link_gain
from .db import DbConfig, InterferenceDb, latency_model
from .detector import DetectorConfig, PuDetector
from .frame import FRAME_LEN, PseudonymSource, frame_encode, pseudonym_hex
from .ofdm import DataPayload, IqBlock, OfdmConfig
from .watermark import SchemeKind, WatermarkScheme, apply_watermark, gains_for_pbit

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# --- configuration


@dataclass(frozen=True)
class SuConfig:
    id: str
    snr_at_pu_db: float
    query_period_s: float = 0.05
    link: LinkModel = field(default_factory=LinkModel)
    start_offset_samples: Optional[int] = None  # None -> random within one packet

    def to_dict(self) -> dict:
        return {"id": self.id, "snr_at_pu_db": self.snr_at_pu_db,
                "query_period_s": self.query_period_s, "link": self.link.to_dict(),
                "start_offset_samples": self.start_offset_samples}

    @classmethod
    def from_dict(cls, d: dict) -> "SuConfig":
        d = dict(d)
        d["link"] = LinkModel.from_dict(d.get("link"))
        return cls(**d)


@dataclass(frozen=True)
class ScenarioConfig:
    ofdm: OfdmConfig = field(default_factory=OfdmConfig.for_fft)
    scheme: WatermarkScheme = field(default_factory=WatermarkScheme.stopsec)
    sus: tuple = (SuConfig("su1", 0.0),)
    noise: NoiseModel = field(default_factory=NoiseModel.floor)
    ttl_s: float = 1.0
    sim_duration_s: float = 2.0
    seed: int = 0
    channel_id: str = "ch0"
    db_tb_s: float = 0.005
    db_alpha: float = 0.0
    stop_on_match: bool = True
    detector: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "sus", tuple(self.sus))
        if not self.sus:
            raise ConfigError("at least one SU is required")
        if len({s.id for s in self.sus}) != len(self.sus):
            raise ConfigError("SU ids must be unique")
        for s in self.sus:
            if not 0 < s.query_period_s <= self.ttl_s:
                raise ConfigError(f"{s.id}: query period must be in (0, ttl_s]")
        if self.sim_duration_s <= 0:
            raise ConfigError("sim_duration_s must be positive")
        if self.scheme.kind is not SchemeKind.STOPSEC:
            raise ConfigError("the closed loop runs the single-subcarrier scheme only")
        if self.noise.mode not in (NoiseMode.FLOOR_DB, NoiseMode.NONE):
            raise ConfigError("scenario noise is an absolute floor (floor_db) or none")

    @property
    def frame_duration_s(self) -> float:
        return FRAME_LEN * self.ofdm.packet_duration_s

    def with_snr(self, snr_db: float) -> "ScenarioConfig":
        """Shift all SUs so the weakest sits at ``snr_db``; offsets are kept."""
        lo = min(s.snr_at_pu_db for s in self.sus)
        sus = tuple(replace(s, snr_at_pu_db=s.snr_at_pu_db - lo + snr_db) for s in self.sus)
        return replace(self, sus=sus)

    def to_dict(self) -> dict:
        return {
            "ofdm": self.ofdm.to_dict(),
            "scheme": self.scheme.to_dict(),
            "sus": [s.to_dict() for s in self.sus],
            "noise": self.noise.to_dict(),
            "ttl_s": self.ttl_s,
            "sim_duration_s": self.sim_duration_s,
            "seed": self.seed,
            "channel_id": self.channel_id,
            "db_tb_s": self.db_tb_s,
            "db_alpha": self.db_alpha,
            "stop_on_match": self.stop_on_match,
            "detector": dict(self.detector),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        # keys starting with "_" are comments
        d = {k: v for k, v in dict(d).items() if not k.startswith("_")}
        try:
            o = dict(d.pop("ofdm", {}) or {})
            d["ofdm"] = OfdmConfig.for_fft(int(o.pop("fft_size", 64)), **o)
            d["scheme"] = WatermarkScheme.from_dict(d.get("scheme") or {})
            d["sus"] = tuple(SuConfig.from_dict(s) for s in d.get("sus", []))
            d["noise"] = NoiseModel.from_dict(d.get("noise"))
            unknown = set(d) - set(cls.__dataclass_fields__)
            if unknown:
                raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}") from e
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    try:
        return ScenarioConfig.from_dict(d)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e


# Residual carrier offsets for concurrent SUs.  Independent oscillators never
# share a carrier phase for long; with identical frequencies two pseudonym
# carriers in one bin would keep a fixed relative phase and could cancel.
MULTI_SU_CFO_HZ = (0.0, 170.0, -230.0, 310.0, -90.0)


def default_config(fft_size: int = 64, n_sus: int = 1, snr_db: float = -8.0,
                   spacing_db: float = 3.0, **kw) -> ScenarioConfig:
    """2 MHz / 64-point row by default; SUs ``spacing_db`` apart, weakest at ``snr_db``."""
    def link(i):
        if n_sus == 1:
            return LinkModel()
        return LinkModel(cfo_hz=MULTI_SU_CFO_HZ[i % len(MULTI_SU_CFO_HZ)])
    sus = tuple(SuConfig(f"su{i + 1}", snr_db + spacing_db * (n_sus - 1 - i), link=link(i))
                for i in range(n_sus))
    return ScenarioConfig(ofdm=OfdmConfig.for_fft(fft_size), sus=sus, **kw)


# --- agents


class SuStatus(str, enum.Enum):
    TRANSMITTING = "TRANSMITTING"
    STOPPED = "STOPPED"


@dataclass
class LogEntry:
    pseudonym: int
    t_start: float
    t_end: Optional[float]
    channel: str
    matched: bool = False


class SuAgent:
    def __init__(self, sc: ScenarioConfig, su: SuConfig, ss: np.random.SeedSequence):
        s_pn, s_data, s_misc = ss.spawn(3)
        self.cfg = su
        self.sc = sc
        c = sc.ofdm
        self.ids = PseudonymSource(s_pn)
        self.data_rng = np.random.default_rng(s_data)
        misc = np.random.default_rng(s_misc)
        off = su.start_offset_samples
        self.offset = int(misc.integers(0, c.packet_len)) if off is None else int(off)
        self.query_phase = float(misc.uniform(0, su.query_period_s))
        self.phase = float(misc.uniform(0, 2 * np.pi))
        noise_ref = 1.0  # FLOOR_DB noise is applied relative to this reference
        if sc.noise.mode is NoiseMode.FLOOR_DB:
            noise_ref = 10 ** (sc.noise.value / 10)
        p_ref = c.n_data + c.n_pilot
        p_ref /= c.fft_size
        self.amp = math.sqrt(noise_ref * 10 ** (su.snr_at_pu_db / 10) / p_ref)
        self.link = replace(su.link, phase_rad=su.link.phase_rad + self.phase)
        self.delay = su.link.timing_offset_samples
        self._gains = {b: gains_for_pbit(sc.scheme, b, c.symbols_per_packet) for b in (0, 1)}
        self.status = SuStatus.TRANSMITTING
        self.stop_time: Optional[float] = None
        self.stop_sample: Optional[int] = None  # first silent sample on the PU timeline
        self.pseudonym_log: list[LogEntry] = []
        self._frame = None
        self._k = -1
        self._pkt = None
        self.frames_started = 0

    @property
    def first_arrival(self) -> int:
        return self.offset + self.delay

    @property
    def frame_progress(self) -> int:
        return max(self._k, 0) % FRAME_LEN

    @property
    def current_pseudonym(self) -> Optional[int]:
        return self.pseudonym_log[-1].pseudonym if self.pseudonym_log else None

    def _packet(self, k: int, events) -> np.ndarray:
        c = self.sc.ofdm
        fs = c.sample_rate_hz
        i = k % FRAME_LEN
        t0 = (self.offset + k * c.packet_len) / fs
        if i == 0:
            if self.pseudonym_log:
                self.pseudonym_log[-1].t_end = t0
            p = self.ids()
            self._frame = frame_encode(p)
            self.pseudonym_log.append(LogEntry(p, t0, None, self.sc.channel_id))
            self.frames_started += 1
            events.append({"t": t0, "type": "frame_start", "su": self.cfg.id,
                           "pseudonym": pseudonym_hex(p)})
        payload = DataPayload.random(c, self.data_rng)
        blk = apply_watermark(self.sc.scheme, c, payload, int(self._frame[i]))
        return blk.samples

    def emit(self, n0: int, n1: int, events) -> Optional[np.ndarray]:
        """Samples this SU contributes to PU samples ``[n0, n1)``, or None if silent."""
        c = self.sc.ofdm
        L = c.packet_len
        a0 = self.first_arrival
        end = n1 if self.stop_sample is None else min(n1, self.stop_sample)
        if end <= max(n0, a0):
            return None
        out = np.zeros(n1 - n0, dtype=np.complex128)
        n = max(n0, a0)
        while n < end:
            k = (n - a0) // L
            if k != self._k:
                self._pkt = self._packet(k, events)
                self._k = k
            off = (n - a0) - k * L
            m = min(L - off, end - n)
            out[n - n0: n - n0 + m] = self._pkt[off: off + m]
            n += m
        g = link_gain(self.link, n0, n1 - n0, c.sample_rate_hz)
        return out * (self.amp * g)

    def stop(self, t: float):
        c = self.sc.ofdm
        self.status = SuStatus.STOPPED
        self.stop_time = t
        self.stop_sample = math.ceil(t * c.sample_rate_hz) + self.delay
        if self.pseudonym_log and self.pseudonym_log[-1].t_end is None:
            self.pseudonym_log[-1].t_end = t

    def matching_entry(self, db: InterferenceDb, now: float) -> Optional[LogEntry]:
        t0 = self.sc.ttl_s
        for e in reversed(self.pseudonym_log):
            t_end = now if e.t_end is None else e.t_end
            if t_end + 2 * t0 < now:
                break
            r = db.query_pseudonym(e.pseudonym, e.channel, now, "su")
            if r is not None and e.t_start <= r.timestamp <= t_end + t0:
                return e
        return None


# --- results


@dataclass
class LatencyRecord:
    t_interference_start: float
    t_all_stopped: Optional[float]
    per_su_stop_times: dict
    reports_written: int
    phantom_reports: int = 0
    frames_sent: int = 0
    frames_matched: int = 0
    frames_counted: int = 0
    sim_end: float = 0.0

    @property
    def latency(self) -> Optional[float]:
        if self.t_all_stopped is None:
            return None
        return self.t_all_stopped - self.t_interference_start

    @property
    def stop_order(self) -> list[str]:
        done = [(t, k) for k, t in self.per_su_stop_times.items() if t is not None]
        return [k for _, k in sorted(done)]

    def to_dict(self) -> dict:
        return {"t_interference_start": self.t_interference_start,
                "t_all_stopped": self.t_all_stopped, "latency": self.latency,
                "per_su_stop_times": self.per_su_stop_times,
                "reports_written": self.reports_written,
                "phantom_reports": self.phantom_reports,
                "frames_sent": self.frames_sent, "frames_matched": self.frames_matched,
                "frames_counted": self.frames_counted, "sim_end": self.sim_end}


def _r(x):
    return None if x is None else round(float(x), 9)


def _dump_events(events) -> str:
    buf = io.StringIO()
    for e in events:
        e = {k: (_r(v) if isinstance(v, float) else v) for k, v in e.items()}
        buf.write(json.dumps(e, sort_keys=True) + "\n")
    return buf.getvalue()


def run_scenario(sc: ScenarioConfig, event_log=None, chip_dump=None,
                 detect_tail_s: float = 0.0) -> tuple[LatencyRecord, list[dict]]:
    """Run one closed-loop trial.

    Returns the latency record and the event list.  ``event_log`` may be a path
    or text stream for JSON lines.  ``detect_tail_s`` (detection-probability
    runs) excludes frames ending in the last stretch of the run from the
    frame counts, since their report could not yet have been matched.
    """
    c = sc.ofdm
    fs = c.sample_rate_hz
    L = c.packet_len
    root = np.random.SeedSequence(sc.seed)
    s_sus, s_noise = root.spawn(2)
    agents = [SuAgent(sc, su, ss) for su, ss in zip(sc.sus, s_sus.spawn(len(sc.sus)))]
    noise_rng = np.random.default_rng(s_noise)
    noise_p = sc.noise.noise_power(1.0)
    dcfg = DetectorConfig(cfg=c, code=sc.scheme.code,
                          n_pseudonym_subcarriers=sc.scheme.n_pseudonym_subcarriers,
                          channel_id=sc.channel_id, **sc.detector)
    det = PuDetector(dcfg, chip_dump=chip_dump)
    db = InterferenceDb(DbConfig(ttl_seconds=sc.ttl_s,
                                 max_query_period_s=max(s.query_period_s for s in sc.sus)))
    events: list[dict] = []
    heap: list = []
    order = 0

    def push(t, kind, payload):
        nonlocal order
        heapq.heappush(heap, (t, order, kind, payload))
        order += 1

    def lat():
        active = sum(a.status is SuStatus.TRANSMITTING for a in agents)
        return latency_model(sc.db_tb_s, sc.db_alpha, max(active, 1))

    for i, a in enumerate(agents):
        push(a.query_phase, "query", i)
        events.append({"t": a.first_arrival / fs, "type": "su_start", "su": a.cfg.id,
                       "snr_db": a.cfg.snr_at_pu_db, "offset": a.offset})
    t_start = min(a.first_arrival for a in agents) / fs
    n_end = int(round(sc.sim_duration_s * fs))
    reports = 0
    phantoms = 0
    n0 = 0
    while n0 < n_end:
        n1 = min(n0 + L, n_end)
        horizon = n1 / fs
        while heap and heap[0][0] < horizon:
            t, _, kind, x = heapq.heappop(heap)
            if kind == "write":
                db.write_report(x, "pu")
                db.maybe_purge(t)
                events.append({"t": t, "type": "db_write", "pseudonym": pseudonym_hex(x.pseudonym),
                               "report_ts": x.timestamp})
            elif kind == "query":
                a = agents[x]
                if a.status is not SuStatus.TRANSMITTING:
                    continue
                e = a.matching_entry(db, t)
                if e is not None and not e.matched:
                    e.matched = True
                    events.append({"t": t, "type": "match", "su": a.cfg.id,
                                   "pseudonym": pseudonym_hex(e.pseudonym)})
                    if sc.stop_on_match:
                        push(t + lat(), "stop", x)
                push(t + a.cfg.query_period_s, "query", x)
            elif kind == "stop":
                a = agents[x]
                if a.status is SuStatus.TRANSMITTING:
                    a.stop(t)
                    events.append({"t": t, "type": "stop", "su": a.cfg.id})
        if sc.stop_on_match and all(a.status is SuStatus.STOPPED for a in agents):
            n0 = n1  # events up to this chunk's end have been processed
            break
        parts = [s for a in agents if (s := a.emit(n0, n1, events)) is not None]
        x = np.sum(parts, axis=0) if parts else np.zeros(n1 - n0, dtype=np.complex128)
        if noise_p > 0:
            x = x + awgn(n1 - n0, noise_p, noise_rng)
        for r in det.feed(IqBlock(x, fs, "pu", n0)):
            reports += 1
            known = any(e.pseudonym == r.pseudonym for a in agents for e in a.pseudonym_log)
            phantoms += not known
            events.append({"t": horizon, "type": "report", "pseudonym": pseudonym_hex(r.pseudonym),
                           "report_ts": r.timestamp, "known": known})
            push(max(r.timestamp, horizon) + lat(), "write", r)
        n0 = n1
    sim_end = n0 / fs
    stops = {a.cfg.id: a.stop_time for a in agents}
    all_stopped = None
    if all(t is not None for t in stops.values()):
        all_stopped = max(stops.values())
    cutoff = sim_end - detect_tail_s
    counted = [e for a in agents for e in a.pseudonym_log
               if e.t_end is not None and e.t_end <= cutoff]
    rec = LatencyRecord(t_start, all_stopped, stops, reports, phantoms,
                        sum(a.frames_started for a in agents),
                        sum(e.matched for e in counted), len(counted), sim_end)
    events.sort(key=lambda e: (e["t"], e["type"]))
    events.append({"t": sim_end, "type": "end", **{k: v for k, v in rec.to_dict().items()
                                                  if k != "per_su_stop_times"}})
    if event_log is not None:
        text = _dump_events(events)
        if hasattr(event_log, "write"):
            event_log.write(text)
        else:
            Path(event_log).write_text(text)
    return rec, events


# --- sweeps


def _trial_seed(base: int, snr: float, i: int) -> int:
    ss = np.random.SeedSequence([int(base), int(round((snr + 1000) * 1000)), int(i)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _run_trial(args):
    sc, snr, seed = args
    rec, _ = run_scenario(replace(sc.with_snr(snr), seed=seed))
    return rec


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("STOPSEC_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, jobs, progress=None):
    n = _workers()
    out = []
    if n == 1 or len(jobs) == 1:
        for k, j in enumerate(jobs):
            out.append(fn(j))
            if progress:
                progress(k + 1, len(jobs))
        return out
    with ProcessPoolExecutor(n) as ex:
        for k, r in enumerate(ex.map(fn, jobs)):
            out.append(r)
            if progress:
                progress(k + 1, len(jobs))
    return out


LATENCY_HEADER = ["snr", "mean_latency", "p95", "stop_rate"]


@dataclass(frozen=True)
class LatencyPoint:
    snr: float
    mean_latency: float
    p95: float
    stop_rate: float
    n_trials: int
    latencies: tuple = ()

    def row(self) -> list:
        return [f"{self.snr:g}", f"{self.mean_latency:.6f}", f"{self.p95:.6f}", f"{self.stop_rate:.4f}"]


def sweep_latency(sc: ScenarioConfig, snr_grid, n_trials: int, progress=None) -> list[LatencyPoint]:
    """Monte-Carlo stop latency per SNR.  Trials that never stop all SUs are
    censored at ``sim_duration_s`` in the mean and percentile."""
    grid = [float(s) for s in snr_grid]
    if not grid:
        raise ValueError("SNR grid must be non-empty")
    if n_trials < 1:
        raise ValueError("need at least one trial per point")
    jobs = [(sc, s, _trial_seed(sc.seed, s, i)) for s in grid for i in range(n_trials)]
    recs = _map(_run_trial, jobs, progress)
    out = []
    for j, s in enumerate(grid):
        rr = recs[j * n_trials:(j + 1) * n_trials]
        lat = np.array([r.latency if r.latency is not None else sc.sim_duration_s for r in rr])
        rate = float(np.mean([r.latency is not None for r in rr]))
        out.append(LatencyPoint(s, float(lat.mean()), float(np.percentile(lat, 95)), rate,
                                n_trials, tuple(float(v) for v in lat)))
    return out


def latency_crossing(points, level: float) -> Optional[float]:
    """SNR where mean latency first drops to ``level`` (linear interpolation)."""
    pts = sorted(points, key=lambda p: p.snr)
    for a, b in zip(pts, pts[1:]):
        if a.mean_latency > level >= b.mean_latency:
            f = (a.mean_latency - level) / (a.mean_latency - b.mean_latency)
            return a.snr + f * (b.snr - a.snr)
    if pts and pts[0].mean_latency <= level:
        return pts[0].snr
    return None


DETECT_HEADER = ["snr", "p_detect", "n_sus"]


@dataclass(frozen=True)
class DetectPoint:
    snr: float
    p_detect: float
    n_sus: int
    n_frames: int

    def row(self) -> list:
        return [f"{self.snr:g}", f"{self.p_detect:.6f}", self.n_sus]


def _run_detect(args):
    sc, snr, seed, tail = args
    rec, _ = run_scenario(replace(sc.with_snr(snr), seed=seed), detect_tail_s=tail)
    return rec


def measure_detection_probability(sc: ScenarioConfig, snr_grid, n_frames: int,
                                  progress=None) -> list[DetectPoint]:
    """Fraction of transmitted frames that are decoded, written and matched by
    their SU's own query.  SUs keep transmitting (no stops)."""
    if n_frames < 100:
        raise ValueError("frame budget per point must be at least 100")
    grid = [float(s) for s in snr_grid]
    n_su = len(sc.sus)
    tail = 2 * max(s.query_period_s for s in sc.sus) + 4 * sc.db_tb_s + sc.ofdm.packet_duration_s
    per_su = math.ceil(n_frames / n_su)
    dur = (per_su + 1) * sc.frame_duration_s + tail
    base = replace(sc, stop_on_match=False, sim_duration_s=dur)
    jobs = [(base, s, _trial_seed(sc.seed, s, 0), tail) for s in grid]
    recs = _map(_run_detect, jobs, progress)
    return [DetectPoint(s, r.frames_matched / max(r.frames_counted, 1), n_su, r.frames_counted)
            for s, r in zip(grid, recs)]
