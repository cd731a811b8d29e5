import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stopsec.db import (
    AuthorizationError, DbConfig, InterferenceDb, InterferenceReport, Perm, bench_concurrent,
    fit_alpha, latency_model, seed_fixture, size_model,
)


@pytest.fixture(params=["memory", "sqlite"])
def store(request, tmp_path):
    path = None if request.param == "memory" else tmp_path / "db.sqlite"
    with InterferenceDb(DbConfig(ttl_seconds=1.0), path) as db:
        yield db


def R(p, ts, ch="ch0"):
    return InterferenceReport(p, ts, ch)


def test_write_then_query(store):
    rc = store.write_report(R(7, 10.0))
    assert rc.seq == 1 and not rc.replaced
    assert store.query_pseudonym(7, "ch0", 10.5) == R(7, 10.0)
    assert store.query_pseudonym(7, "ch1", 10.5) is None
    assert store.query_pseudonym(8, "ch0", 10.5) is None


def test_ttl_boundary(store):
    store.write_report(R(1, 5.0))
    assert store.query_pseudonym(1, "ch0", 6.0) is not None  # ts + T0 == now stays visible
    assert store.query_pseudonym(1, "ch0", 6.0 + 1e-9) is None
    assert store.visible(6.0) and not store.visible(6.1)


def test_overwrite_keeps_newest(store):
    store.write_report(R(3, 1.0))
    rc = store.write_report(R(3, 2.0))
    assert rc.replaced and rc.report.timestamp == 2.0
    rc = store.write_report(R(3, 1.5))  # late, older duplicate does not roll back
    assert rc.replaced and rc.report.timestamp == 2.0
    assert store.query_pseudonym(3, "ch0", 2.5).timestamp == 2.0
    assert len(store.visible(2.5)) == 1


def test_roles(store):
    with pytest.raises(AuthorizationError):
        store.write_report(R(1, 0.0), role="su")
    with pytest.raises(AuthorizationError):
        store.query_pseudonym(1, "ch0", 0.0, role="nobody")
    store.write_report(R(1, 0.0), role="pu")
    assert store.query_pseudonym(1, "ch0", 0.0, role="pu") is not None


def test_purge(store):
    for i in range(10):
        store.write_report(R(i, float(i)))
    assert store.purge_expired(5.5) == 5
    assert sorted(r.pseudonym for r in store.visible(0.0)) == list(range(5, 10))
    assert store.maybe_purge(5.6) == 0  # within T0/4 of the last purge
    assert store.maybe_purge(9.0) > 0


def test_config_validation():
    with pytest.raises(ValueError):
        DbConfig(ttl_seconds=0)
    with pytest.raises(ValueError):
        DbConfig(ttl_seconds=0.5, max_query_period_s=1.0)
    with pytest.raises(ValueError):
        DbConfig(role_policy={"x": ["delete"]})
    c = DbConfig(role_policy={"admin": ["read", "write"]})
    assert c.role_policy["admin"] == {Perm.READ, Perm.WRITE}
    assert DbConfig.from_dict(c.to_dict()) == c


def test_report_wire_format():
    r = InterferenceReport(0x2A, 1.25, "ch3", "lab")
    d = r.to_dict()
    assert d == {"pseudonym": "000002a", "timestamp": 1.25, "channel": "ch3", "location": "lab"}
    assert InterferenceReport.from_dict(d) == r


ops = st.lists(st.tuples(st.sampled_from(["w", "q", "p"]), st.integers(0, 5),
                         st.sampled_from(["a", "b"]), st.floats(0, 20)), max_size=60)


@settings(max_examples=60, deadline=None)
@given(ops)
def test_sequential_oracle(seq):
    oracle = {}
    with InterferenceDb(DbConfig(ttl_seconds=2.0)) as db:
        for op, p, ch, t in seq:
            if op == "w":
                k = (p, ch)
                oracle[k] = max(oracle.get(k, -1.0), t)
                db.write_report(R(p, t, ch))
            elif op == "q":
                got = db.query_pseudonym(p, ch, t)
                ts = oracle.get((p, ch))
                want = ts is not None and ts + 2.0 >= t
                assert (got is not None) == want
                if got:
                    assert got.timestamp == ts
            else:
                db.purge_expired(t)
                oracle = {k: v for k, v in oracle.items() if v + 2.0 >= t}


def test_concurrent_writers_keep_max(store):
    rng = np.random.default_rng(0)
    work = [[(int(p), float(t)) for p, t in zip(rng.integers(0, 20, 50), rng.random(50))]
            for _ in range(8)]

    def go(items):
        for p, t in items:
            store.write_report(R(p, t))

    th = [threading.Thread(target=go, args=(w,)) for w in work]
    for t in th:
        t.start()
    for t in th:
        t.join()
    want = {}
    for items in work:
        for p, t in items:
            want[p] = max(want.get(p, -1), t)
    got = {r.pseudonym: r.timestamp for r in store.visible(0.0)}
    assert got == want
    assert store.seq == 400


def test_latency_and_size_models():
    assert latency_model(0.005, 0.0, 100) == 0.005
    assert latency_model(0.005, 0.01, 101) == pytest.approx(0.01)
    assert size_model(1000, 10, 64) == 640_000
    with pytest.raises(ValueError):
        latency_model(-1, 0, 1)
    u = np.array([1, 10, 100, 1000])
    assert fit_alpha(u, latency_model(0.002, 0.03, u)) == pytest.approx(0.03)
    assert fit_alpha([1, 10], [1.0, 0.5]) == 0.0


def test_bench_smoke(store):
    seed_fixture(store, 50, np.random.default_rng(0))
    r = bench_concurrent(store, "read", 20)
    w = bench_concurrent(store, "WRITE", 20)
    assert r.mode == "READ" and w.mode == "WRITE" and r.n_clients == 20
    assert r.mean_ms > 0 and r.p95_ms >= 0 and r.throughput > 0
    with pytest.raises(ValueError):
        bench_concurrent(store, "delete", 1)


def test_bench_needs_fixture():
    with InterferenceDb() as db, pytest.raises(ValueError):
        bench_concurrent(db, "READ", 1)
