import csv
import json

import pytest

from stopsec.cli import DEFAULTS, EXIT_CONFIG, EXIT_RUNTIME, gen_config, main
from stopsec.scenario import ScenarioConfig, default_config

SCHEMAS = {
    "latency.csv": None,  # depends on subcommand, checked separately
    "crossings.csv": ["scheme", "ebno_db_at_1e-3"],
    "detection.csv": ["snr", "p_detect", "n_sus"],
    "bench.csv": ["mode", "n_clients", "mean_ms", "p95_ms", "throughput"],
}


def _check_csvs(out):
    for f in sorted(out.glob("*.csv")):
        rows = list(csv.reader(f.open()))
        assert rows, f
        header = rows[0]
        if f.name.startswith("ber_"):
            assert header == ["ebno_db", "ber", "n_bits"]
            for r in rows[1:]:
                float(r[0]), float(r[1]), int(r[2])
        elif SCHEMAS.get(f.name):
            assert header == SCHEMAS[f.name]
        assert all(len(r) == len(header) for r in rows)
    m = json.loads((out / "manifest.json").read_text())
    assert {"subcommand", "config", "seeds", "code_version"} <= set(m)
    return m


def test_gen_config_is_loadable(capsys):
    assert main(["gen-config"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert "2 MHz" in d["_comment"]
    sc = ScenarioConfig.from_dict(d)
    assert sc.ofdm.fft_size == 64 and sc.ofdm.sample_rate_hz == 2e6
    for kind in DEFAULTS:
        assert gen_config(kind)["_comment"]


def test_missing_config_exit_2(tmp_path, capsys):
    rc = main(["run-scenario", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")])
    assert rc == EXIT_CONFIG
    assert "nope.json" in capsys.readouterr().err


def test_bad_json_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n "schemes": [,]\n}')
    assert main(["ber-data", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "bad.json:2:" in capsys.readouterr().err


def test_unknown_key_is_config_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"nonsense": 1}')
    assert main(["db-bench", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_empty_scheme_list_is_usage_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"schemes": []}')
    with pytest.raises(SystemExit) as e:
        main(["ber-pseudonym", "--config", str(p), "--out", str(tmp_path / "o")])
    assert e.value.code != 0


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as e:
        main(["run-scenario", "--frobnicate"])
    assert e.value.code == 2


def test_runtime_failure_exit_3(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"fixture_rows": 0, "clients": [1]}')
    assert main(["db-bench", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME


def test_run_scenario_is_reproducible(tmp_path):
    cfg = tmp_path / "sc.json"
    cfg.write_text(json.dumps(default_config(snr_db=-6.0).to_dict()))
    outs = []
    for k in range(2):
        o = tmp_path / f"o{k}"
        assert main(["run-scenario", "--config", str(cfg), "--out", str(o), "--seed", "77"]) == 0
        _check_csvs(o)
        outs.append({f.name: f.read_bytes() for f in o.iterdir()})
    assert outs[0] == outs[1]
    assert b"su1" in outs[0]["latency.csv"]


def test_ber_data_rerun_from_manifest(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"ebno_grid_db": [2, 4], "schemes": [{"kind": "stopsec"}]}))
    a = tmp_path / "a"
    assert main(["ber-data", "--config", str(cfg), "--out", str(a), "--trials", "20000"]) == 0
    m = _check_csvs(a)
    again = tmp_path / "m.json"
    again.write_text(json.dumps(m["config"]))
    b = tmp_path / "b"
    assert main(["ber-data", "--config", str(again), "--out", str(b)]) == 0
    assert (a / "ber_data_stopsec.csv").read_bytes() == (b / "ber_data_stopsec.csv").read_bytes()


def test_small_subcommands_emit_valid_files(tmp_path):
    p = tmp_path / "p.json"
    p.write_text(json.dumps({"snr_grid_db": [-6], "schemes": [{"kind": "cm_fullband", "alpha": 0.2}]}))
    assert main(["ber-pseudonym", "--config", str(p), "--out", str(tmp_path / "bp"), "--trials", "256"]) == 0
    _check_csvs(tmp_path / "bp")

    s = tmp_path / "s.json"
    s.write_text(json.dumps({"snr_grid": [5], "n_trials": 2}))
    assert main(["sweep-latency", "--config", str(s), "--out", str(tmp_path / "sl")]) == 0
    rows = list(csv.reader((tmp_path / "sl" / "latency.csv").open()))
    assert rows[0] == ["snr", "mean_latency", "p95", "stop_rate"] and rows[1][3] == "1.0000"
    _check_csvs(tmp_path / "sl")

    b = tmp_path / "b.json"
    b.write_text(json.dumps({"clients": [1, 5], "fixture_rows": 20, "backend": "memory"}))
    assert main(["db-bench", "--config", str(b), "--out", str(tmp_path / "db")]) == 0
    _check_csvs(tmp_path / "db")

    d = tmp_path / "d.json"
    sc = default_config(snr_db=10.0)
    d.write_text(json.dumps({"snr_grid": [10], "n_frames": 100, "scenario": sc.to_dict()}))
    assert main(["detection-prob", "--config", str(d), "--out", str(tmp_path / "dp")]) == 0
    rows = list(csv.reader((tmp_path / "dp" / "detection.csv").open()))
    assert float(rows[1][1]) > 0.9
    _check_csvs(tmp_path / "dp")
