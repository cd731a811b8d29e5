"""``stopsec`` command line: one subcommand per experiment, JSON in, CSV + manifest out."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import ber, db as dbm, scenario as scn
from .channel import Fading
from .ofdm import OfdmConfig
from .scenario import ConfigError
from .watermark import WatermarkScheme

log = logging.getLogger("stopsec")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3

TABLE_ROW_COMMENT = ("2 MHz channel, 64-point FFT, 31.25 kHz subcarrier spacing, "
                     "one SU on the single pseudonym subcarrier, MSEQ15 chips")

# experiment defaults; every key may be overridden from --config
DEFAULTS = {
    "ber-pseudonym": {
        "ofdm": {"fft_size": 64},
        "schemes": [{"kind": "stopsec"},
                    {"kind": "cm_fullband", "modulation_index": 0.2},
                    {"kind": "cm_fullband", "modulation_index": 0.3},
                    {"kind": "pam_fullband", "modulation_index": 0.2}],
        "snr_grid_db": [-14, -13, -12, -11, -10, -9, -8, -7, -6, -5, -4, -3],
        "fading": {"kind": "none"},
        "max_errors": 100,
        "max_bits": None,
        "stop_below": None,
        "seed": 0,
    },
    "ber-data": {
        "ofdm": {"fft_size": 64},
        "schemes": [{"kind": "unwatermarked"}, {"kind": "stopsec"},
                    {"kind": "cm_fullband", "modulation_index": 0.2},
                    {"kind": "pam_fullband", "modulation_index": 0.2}],
        "ebno_grid_db": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
        "n_bits": None,
        "seed": 0,
    },
    "sweep-latency": {"snr_grid": [-12, -11, -10, -9, -8, -7], "n_trials": 20},
    "detection-prob": {"snr_grid": [-12, -11, -10, -9, -8], "n_frames": 120},
    "db-bench": {
        "db": {"ttl_seconds": 1.0},
        "backend": "sqlite",
        "fixture_rows": 1000,
        "clients": [1, 10, 100, 1000, 10000],
        "modes": ["READ", "WRITE"],
        "ops_per_client": 1,
        "seed": 0,
    },
}


class UsageError(ValueError):
    pass


# --- config handling


def _read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}") from e
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return d


def _strip_comments(d):
    if isinstance(d, dict):
        return {k: _strip_comments(v) for k, v in d.items() if not k.startswith("_")}
    if isinstance(d, list):
        return [_strip_comments(v) for v in d]
    return d


def _experiment(name: str, path) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS.get(name, {})))
    if path is None:
        return cfg
    user = _strip_comments(_read_json(path))
    if name in DEFAULTS:
        unknown = set(user) - set(cfg) - {"scenario"}
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    cfg.update(user)
    return cfg


def _ofdm(d: dict) -> OfdmConfig:
    d = dict(d or {})
    try:
        return OfdmConfig.for_fft(int(d.pop("fft_size", 64)), **d)
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"ofdm: {e}") from e


def _schemes(items) -> list[WatermarkScheme]:
    if not items:
        raise UsageError("scheme list is empty")
    try:
        return [WatermarkScheme.from_dict(s) for s in items]
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"schemes: {e}") from e


def _scenario(args, exp: dict) -> scn.ScenarioConfig:
    """Scenario from ``exp["scenario"]``, a bare scenario file, or the default."""
    if "scenario" in exp:
        try:
            sc = scn.ScenarioConfig.from_dict(exp["scenario"])
        except ConfigError as e:
            raise ConfigError(f"{args.config}: {e}") from e
    elif args.config is not None and args.cmd == "run-scenario":
        sc = scn.load_config(args.config)
    else:
        sc = scn.default_config()
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    return sc


# --- output


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    log.info("wrote %s", path)


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _manifest(out: Path, args, config, seeds):
    m = {
        "subcommand": args.cmd,
        "argv": [a for a in sys.argv[1:]],
        "config": config,
        "seeds": seeds,
        "code_version": _version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (out / "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")


def _progress(tag):
    def cb(*a):
        if len(a) == 2:
            log.info("%s %d/%d", tag, *a)
        else:
            log.info("%s %s", tag, a[0])
    return cb


# --- subcommands


def cmd_ber_pseudonym(args, out: Path):
    exp = _experiment("ber-pseudonym", args.config)
    cfg = _ofdm(exp["ofdm"])
    schemes = _schemes(exp["schemes"])
    seed = int(exp["seed"] if args.seed is None else args.seed)
    fading = Fading.from_dict(exp.get("fading"))
    grid = exp.get("ebno_grid_db") or [ber.snr_to_pseudonym_ebno(cfg, s) for s in exp["snr_grid_db"]]
    max_bits = args.trials if args.trials else exp.get("max_bits")
    cross = []
    for s in schemes:
        pts = ber.pseudonym_ber_curve(s, cfg, grid, seed=seed, stop_below=exp.get("stop_below"),
                                      progress=_progress("ber-pseudonym"), fading=fading,
                                      max_bits=max_bits, max_errors=int(exp["max_errors"]))
        _write_csv(out / f"ber_pseudonym_{s.label}.csv", ber.BER_HEADER.split(","),
                   [p.row().split(",") for p in pts])
        c = ber.ber_crossing(pts)
        cross.append([s.label, "" if c is None else f"{c:.4f}"])
    _write_csv(out / "crossings.csv", ["scheme", "ebno_db_at_1e-3"], cross)
    exp.update(seed=seed, max_bits=max_bits)
    _manifest(out, args, exp, {"seed": seed})


def cmd_ber_data(args, out: Path):
    exp = _experiment("ber-data", args.config)
    cfg = _ofdm(exp["ofdm"])
    schemes = _schemes(exp["schemes"])
    seed = int(exp["seed"] if args.seed is None else args.seed)
    n_bits = args.trials or exp.get("n_bits")
    cross = []
    for s in schemes:
        pts = ber.data_ber_curve(s, cfg, exp["ebno_grid_db"], seed=seed,
                                 progress=_progress("ber-data"), n_bits=n_bits)
        _write_csv(out / f"ber_data_{s.label}.csv", ber.BER_HEADER.split(","),
                   [p.row().split(",") for p in pts])
        c = ber.ber_crossing(pts)
        cross.append([s.label, "" if c is None else f"{c:.4f}"])
    _write_csv(out / "crossings.csv", ["scheme", "ebno_db_at_1e-3"], cross)
    exp.update(seed=seed, n_bits=n_bits)
    _manifest(out, args, exp, {"seed": seed})


def cmd_run_scenario(args, out: Path):
    exp = _experiment("run-scenario", args.config) if args.config else {}
    sc = _scenario(args, exp)
    rec, events = scn.run_scenario(sc, event_log=out / "events.jsonl")
    d = rec.to_dict()
    _write_csv(out / "latency.csv", ["su", "stop_time_s", "stop_order"],
               [[k, "" if v is None else f"{v:.6f}",
                 rec.stop_order.index(k) + 1 if k in rec.stop_order else ""]
                for k, v in sorted(rec.per_su_stop_times.items())])
    (out / "record.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    _manifest(out, args, sc.to_dict(), {"seed": sc.seed})


def cmd_sweep_latency(args, out: Path):
    exp = _experiment("sweep-latency", args.config)
    sc = _scenario(args, exp)
    n = args.trials or int(exp["n_trials"])
    pts = scn.sweep_latency(sc, exp["snr_grid"], n, progress=_progress("sweep-latency"))
    _write_csv(out / "latency.csv", scn.LATENCY_HEADER, [p.row() for p in pts])
    _manifest(out, args, {"scenario": sc.to_dict(), "snr_grid": exp["snr_grid"], "n_trials": n},
              {"seed": sc.seed})


def cmd_detection_prob(args, out: Path):
    exp = _experiment("detection-prob", args.config)
    sc = _scenario(args, exp)
    n = args.trials or int(exp["n_frames"])
    pts = scn.measure_detection_probability(sc, exp["snr_grid"], n,
                                            progress=_progress("detection-prob"))
    _write_csv(out / "detection.csv", scn.DETECT_HEADER, [p.row() for p in pts])
    _manifest(out, args, {"scenario": sc.to_dict(), "snr_grid": exp["snr_grid"], "n_frames": n},
              {"seed": sc.seed})


def cmd_db_bench(args, out: Path):
    exp = _experiment("db-bench", args.config)
    seed = int(exp["seed"] if args.seed is None else args.seed)
    try:
        dcfg = dbm.DbConfig.from_dict(exp["db"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"db: {e}") from e
    if exp["backend"] not in ("sqlite", "memory"):
        raise ConfigError(f"backend must be sqlite or memory, got {exp['backend']!r}")
    clients = [int(c) for c in exp["clients"]]
    if args.trials:
        clients = [c for c in clients if c <= args.trials] or [args.trials]
    path = out / "bench.sqlite" if exp["backend"] == "sqlite" else None
    if path is not None and path.exists():
        path.unlink()
    rows = []
    with dbm.InterferenceDb(dcfg, path) as store:
        dbm.seed_fixture(store, int(exp["fixture_rows"]), np.random.default_rng(seed))
        for mode in exp["modes"]:
            for n in clients:
                r = dbm.bench_concurrent(store, mode, n, int(exp["ops_per_client"]), seed)
                log.info("db-bench %s %d clients mean %.3f ms", mode, n, r.mean_ms)
                rows.append(r.row())
    _write_csv(out / "bench.csv", dbm.BENCH_HEADER, rows)
    exp.update(seed=seed, clients=clients)
    _manifest(out, args, exp, {"seed": seed})


def gen_config(kind: str = "scenario") -> dict:
    if kind == "scenario":
        d = scn.default_config(snr_db=-8.0).to_dict()
        return {"_comment": TABLE_ROW_COMMENT, **d}
    d = json.loads(json.dumps(DEFAULTS[kind]))
    if kind in ("sweep-latency", "detection-prob"):
        d["scenario"] = {"_comment": TABLE_ROW_COMMENT, **scn.default_config().to_dict()}
    return {"_comment": f"defaults for `stopsec {kind}`", **d}


def cmd_gen_config(args, out: Path | None):
    text = json.dumps(gen_config(args.kind), indent=2) + "\n"
    if out is not None:
        (out / f"{args.kind}.json").write_text(text)
    sys.stdout.write(text)


def cmd_serve(args, out):
    from .service import ReportService
    dcfg = dbm.DbConfig.from_dict(_read_json(args.config).get("db") if args.config else None)
    store = dbm.InterferenceDb(dcfg, args.db)
    svc = ReportService(store, args.host, args.port)
    log.warning("serving on http://%s:%d", *svc.address)
    try:
        svc.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        svc.stop()
        store.close()


COMMANDS = {
    "ber-pseudonym": cmd_ber_pseudonym,
    "ber-data": cmd_ber_data,
    "sweep-latency": cmd_sweep_latency,
    "run-scenario": cmd_run_scenario,
    "detection-prob": cmd_detection_prob,
    "db-bench": cmd_db_bench,
    "gen-config": cmd_gen_config,
    "serve": cmd_serve,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed (u64)")
    common.add_argument("--trials", type=int, help="override trials / frames / bits per point")
    common.add_argument("-v", "--verbose", action="count", default=0)
    p = argparse.ArgumentParser(prog="stopsec", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "gen-config":
            sp.add_argument("--kind", default="scenario", choices=["scenario", *DEFAULTS])
        if name == "serve":
            sp.add_argument("--host", default="127.0.0.1")
            sp.add_argument("--port", type=int, default=8080)
            sp.add_argument("--db", type=Path, help="SQLite file (default: in memory)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(message)s",
                        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)])
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        parser.error("--seed must be an unsigned 64-bit integer")
    if args.trials is not None and args.trials < 1:
        parser.error("--trials must be positive")
    out = args.out
    try:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        elif args.cmd not in ("gen-config", "serve"):
            out = Path(f"out-{args.cmd}")
            out.mkdir(exist_ok=True)
        COMMANDS[args.cmd](args, out)
    except UsageError as e:
        parser.error(str(e))
    except ConfigError as e:
        print(f"stopsec: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # runtime failure
        log.debug("traceback", exc_info=True)
        print(f"stopsec: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
