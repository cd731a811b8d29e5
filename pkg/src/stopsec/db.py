"""Interference-report store.

One serialized writer, any number of concurrent readers, TTL expiry evaluated
against a caller-supplied clock, and match-based replacement keyed on
``(pseudonym, channel)``.  Two backends share the semantics: an in-memory
copy-on-write map (simulator fast path) and a single-file SQLite database in
WAL mode.
"""
from __future__ import annotations

import enum
import queue
import sqlite3
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .frame import parse_pseudonym, pseudonym_hex


class AuthorizationError(PermissionError):
    pass


class Perm(str, enum.Enum):
    READ = "READ"
    WRITE = "WRITE"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.upper() in cls.__members__:
            return cls[value.upper()]
        return None


DEFAULT_POLICY = {"pu": frozenset({Perm.READ, Perm.WRITE}), "su": frozenset({Perm.READ})}


@dataclass(frozen=True)
class InterferenceReport:
    pseudonym: int
    timestamp: float
    channel_id: str = "ch0"
    location: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"pseudonym": pseudonym_hex(self.pseudonym), "timestamp": self.timestamp,
             "channel": self.channel_id}
        if self.location is not None:
            d["location"] = self.location
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InterferenceReport":
        return cls(parse_pseudonym(str(d["pseudonym"])), float(d["timestamp"]),
                   str(d.get("channel", d.get("channel_id", "ch0"))), d.get("location"))


@dataclass(frozen=True)
class WriteReceipt:
    seq: int
    replaced: bool
    report: InterferenceReport


@dataclass(frozen=True)
class DbConfig:
    ttl_seconds: float = 1.0
    role_policy: dict = field(default_factory=lambda: dict(DEFAULT_POLICY))
    baseline_latency_tb: float = 0.005
    concurrency_alpha: float = 0.0
    max_query_period_s: float = 0.0

    def __post_init__(self):
        if self.ttl_seconds <= 0:
            raise ValueError("TTL must be positive")
        if self.ttl_seconds < self.max_query_period_s:
            raise ValueError("TTL must be at least the maximum SU query period")
        if self.concurrency_alpha < 0 or self.baseline_latency_tb < 0:
            raise ValueError("latency model parameters must be non-negative")
        pol = {str(k): frozenset(Perm(p) for p in v) for k, v in self.role_policy.items()}
        object.__setattr__(self, "role_policy", pol)

    def to_dict(self) -> dict:
        return {"ttl_seconds": self.ttl_seconds,
                "role_policy": {k: sorted(p.value for p in v) for k, v in self.role_policy.items()},
                "baseline_latency_tb": self.baseline_latency_tb,
                "concurrency_alpha": self.concurrency_alpha,
                "max_query_period_s": self.max_query_period_s}

    @classmethod
    def from_dict(cls, d: dict | None) -> "DbConfig":
        return cls(**(d or {}))


# --- closed-form capacity models


def size_model(u_s: float, r: float, s_r: float) -> float:
    """Storage in bytes for ``u_s`` users, ``r`` reports per user, ``s_r`` bytes per report."""
    if min(u_s, r, s_r) < 0:
        raise ValueError("size model inputs must be non-negative")
    return u_s * r * s_r


def latency_model(t_b: float, alpha_db: float, u_q: float) -> float:
    """Response time with ``u_q`` concurrent queries: t_b * (1 + alpha * (u_q - 1))."""
    if t_b < 0 or alpha_db < 0 or np.any(np.asarray(u_q) < 0):
        raise ValueError("latency model inputs must be non-negative")
    return t_b * (1 + alpha_db * (u_q - 1))


def fit_alpha(n_clients, mean_latency, t_b: float | None = None) -> float:
    """Least-squares alpha for latency_model; t_b defaults to the 1-client point."""
    u = np.asarray(n_clients, dtype=float)
    y = np.asarray(mean_latency, dtype=float)
    if t_b is None:
        t_b = float(y[np.argmin(u)])
    if t_b <= 0:
        return 0.0
    x = u - 1
    den = float(np.dot(x, x))
    if den == 0:
        return 0.0
    return max(0.0, float(np.dot(x, y / t_b - 1) / den))


# --- backends


class _MemoryBackend:
    """Readers grab the current dict reference; writers copy, edit and swap."""

    def __init__(self):
        self._rows: dict = {}

    def upsert(self, r: InterferenceReport) -> tuple[bool, InterferenceReport]:
        rows = dict(self._rows)
        key = (r.pseudonym, r.channel_id)
        old = rows.get(key)
        if old is not None and old.timestamp > r.timestamp:
            r = old
        rows[key] = r
        self._rows = rows
        return old is not None, r

    def get(self, p: int, ch: str):
        return self._rows.get((p, ch))

    def purge(self, cutoff: float) -> int:
        rows = {k: v for k, v in self._rows.items() if v.timestamp >= cutoff}
        n = len(self._rows) - len(rows)
        if n:
            self._rows = rows
        return n

    def all(self):
        return list(self._rows.values())

    def close(self):
        pass


_SCHEMA = """
CREATE TABLE IF NOT EXISTS reports (
    pseudonym TEXT NOT NULL,
    channel TEXT NOT NULL,
    ts REAL NOT NULL,
    location TEXT,
    PRIMARY KEY (pseudonym, channel)
)"""


def _row(t) -> InterferenceReport:
    return InterferenceReport(int(t[0], 16), float(t[2]), t[1], t[3])


class _SqliteBackend:
    def __init__(self, path, pool_size: int = 16):
        self.path = str(path)
        self._w = self._connect()
        self._w.execute("PRAGMA journal_mode=WAL")
        self._w.execute("PRAGMA synchronous=NORMAL")
        self._w.execute(_SCHEMA)
        self._w.commit()
        self._pool: queue.LifoQueue = queue.LifoQueue()
        self._pool_size = pool_size
        self._made = 0
        self._pool_lock = threading.Lock()

    def _connect(self):
        c = sqlite3.connect(self.path, check_same_thread=False, isolation_level=None, timeout=30)
        c.execute("PRAGMA busy_timeout=30000")
        return c

    def _reader(self):
        try:
            return self._pool.get_nowait()
        except queue.Empty:
            pass
        with self._pool_lock:
            if self._made < self._pool_size:
                self._made += 1
                return self._connect()
        return self._pool.get()

    def upsert(self, r):
        c = self._w
        c.execute("BEGIN IMMEDIATE")
        try:
            key = (pseudonym_hex(r.pseudonym), r.channel_id)
            old = c.execute("SELECT pseudonym, channel, ts, location FROM reports "
                            "WHERE pseudonym=? AND channel=?", key).fetchone()
            if old is not None and old[2] > r.timestamp:
                r = _row(old)
            c.execute("INSERT OR REPLACE INTO reports VALUES (?, ?, ?, ?)",
                      (*key, r.timestamp, r.location))
            c.execute("COMMIT")
        except BaseException:
            c.execute("ROLLBACK")
            raise
        return old is not None, r

    def get(self, p, ch):
        c = self._reader()
        try:
            t = c.execute("SELECT pseudonym, channel, ts, location FROM reports "
                          "WHERE pseudonym=? AND channel=?", (pseudonym_hex(p), ch)).fetchone()
        finally:
            self._pool.put(c)
        return _row(t) if t else None

    def purge(self, cutoff):
        cur = self._w.execute("DELETE FROM reports WHERE ts < ?", (cutoff,))
        return cur.rowcount

    def all(self):
        return [_row(t) for t in self._w.execute(
            "SELECT pseudonym, channel, ts, location FROM reports")]

    def close(self):
        while True:
            try:
                self._pool.get_nowait().close()
            except queue.Empty:
                break
        self._w.close()


class InterferenceDb:
    """Role-gated report store.  ``path=None`` keeps everything in memory."""

    def __init__(self, config: DbConfig | None = None, path=None, pool_size: int = 16):
        self.config = config or DbConfig()
        self._backend = _MemoryBackend() if path is None else _SqliteBackend(Path(path), pool_size)
        self._wlock = threading.Lock()
        self._seq = 0
        self._last_purge = None

    @property
    def seq(self) -> int:
        """Number of writes applied so far (the write linearization order)."""
        return self._seq

    def _check(self, role: str, perm: Perm):
        if perm not in self.config.role_policy.get(role, ()):
            raise AuthorizationError(f"role {role!r} lacks {perm.value}")

    def write_report(self, r: InterferenceReport, role: str = "pu") -> WriteReceipt:
        self._check(role, Perm.WRITE)
        with self._wlock:
            replaced, kept = self._backend.upsert(r)
            self._seq += 1
            seq = self._seq
        return WriteReceipt(seq, replaced, kept)

    def query_pseudonym(self, p: int, channel_id: str, now: float,
                        role: str = "su") -> Optional[InterferenceReport]:
        self._check(role, Perm.READ)
        r = self._backend.get(p, channel_id)
        if r is None or r.timestamp + self.config.ttl_seconds < now:
            return None
        return r

    def purge_expired(self, now: float) -> int:
        with self._wlock:
            self._last_purge = now
            return self._backend.purge(now - self.config.ttl_seconds)

    def maybe_purge(self, now: float) -> int:
        """Periodic purge, at most every T0/4 of the supplied clock."""
        if self._last_purge is not None and now - self._last_purge < self.config.ttl_seconds / 4:
            return 0
        return self.purge_expired(now)

    def visible(self, now: float) -> list[InterferenceReport]:
        t0 = self.config.ttl_seconds
        return sorted((r for r in self._backend.all() if r.timestamp + t0 >= now),
                      key=lambda r: (r.pseudonym, r.channel_id))

    def close(self):
        self._backend.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --- concurrency benchmark


@dataclass(frozen=True)
class BenchResult:
    mode: str
    n_clients: int
    mean_ms: float
    p95_ms: float
    throughput: float

    def row(self) -> list:
        return [self.mode, self.n_clients, f"{self.mean_ms:.4f}", f"{self.p95_ms:.4f}",
                f"{self.throughput:.1f}"]


BENCH_HEADER = ["mode", "n_clients", "mean_ms", "p95_ms", "throughput"]


def seed_fixture(db: InterferenceDb, n_rows: int, rng: np.random.Generator, channel="ch0") -> list[int]:
    ps = [int(v) for v in rng.integers(0, 2 ** 26, n_rows)]
    for i, p in enumerate(ps):
        db.write_report(InterferenceReport(p, float(i) * 1e-3, channel), "pu")
    return ps


def bench_concurrent(db: InterferenceDb, mode: str, n_clients: int, ops_per_client: int = 1,
                     seed: int = 0, stack_kib: int = 256) -> BenchResult:
    """Release ``n_clients`` threads together; each times ``ops_per_client`` calls.

    Latency is measured inside each client around every call, so it includes
    waiting for the writer lock (writes) or a pooled connection (reads).
    """
    mode = mode.upper()
    if mode not in ("READ", "WRITE"):
        raise ValueError("mode must be READ or WRITE")
    rng = np.random.default_rng(seed)
    rows = db.visible(0.0)
    if not rows:
        raise ValueError("seed the store with fixture rows first")
    targets = [rows[i] for i in rng.integers(0, len(rows), n_clients)]
    # warm-up so the single-client baseline does not pay for opening a connection
    db.query_pseudonym(targets[0].pseudonym, targets[0].channel_id, targets[0].timestamp, "su")
    lat = np.zeros((n_clients, ops_per_client))
    barrier = threading.Barrier(n_clients + 1)

    def client(i):
        r = targets[i]
        barrier.wait()
        for k in range(ops_per_client):
            t = time.perf_counter()
            if mode == "READ":
                db.query_pseudonym(r.pseudonym, r.channel_id, r.timestamp, "su")
            else:
                db.write_report(InterferenceReport(r.pseudonym, r.timestamp + k, r.channel_id), "pu")
            lat[i, k] = time.perf_counter() - t

    old = threading.stack_size()
    threading.stack_size(stack_kib * 1024)
    try:
        th = [threading.Thread(target=client, args=(i,), daemon=True) for i in range(n_clients)]
        for t in th:
            t.start()
    finally:
        threading.stack_size(old)
    t0 = time.perf_counter()
    barrier.wait()
    for t in th:
        t.join()
    wall = time.perf_counter() - t0
    ms = lat.ravel() * 1e3
    return BenchResult(mode, n_clients, float(ms.mean()), float(np.percentile(ms, 95)),
                       ms.size / wall if wall > 0 else float("inf"))
