"""Command-line entry point: select, calibrate, simulate, analyze, sensitivity, synth.

Exit codes: 0 success, 1 runtime fault, 2 configuration or usage error.
Every output directory receives one ``manifest.json``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (capacity_drop, fd_csv, fundamental_diagram, metrics_json, queue_csv,
                       queue_discharge_stats, scenario_metrics, wave_csv, wave_speed)
from .calibration import (CalibrationResult, calibrate_pair, results_to_json, summarize)
from .defaults import DEFAULTS, JOBS_ENV, MANIFEST_SCHEMA
from .models import ConfigurationError, ParameterSet, default_parameters
from .sensitivity import (ishigami, ishigami_total_indices, oat_sensitivity, pair_objective,
                          rank_parameters, sobol_total_order)
from .sim import (RECORD_FIELDS, SimulationLog, queue_scenario, ring_scenario, run_scenario,
                  stopgo_scenario, write_records)
from .trajectory import (LeaderFollowerPair, SchemaError, SelectionConfig, StopLine, read_tracks,
                         resample, select_candidates, write_tracks)

log = logging.getLogger("cfcalib")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- helpers


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, subcommand: str, config: dict, inputs: dict, seed, wall_time: float):
    """Run metadata; ``wall_time`` is the only field that varies between identical runs."""
    digests = {}
    for name, path in sorted(inputs.items()):
        p = Path(path)
        if p.is_dir():
            digests[name] = {f.name: _digest(f) for f in sorted(p.iterdir()) if f.is_file()
                             and f.name != "manifest.json"}
        elif p.exists():
            digests[name] = _digest(p)
    manifest = {"schema_version": MANIFEST_SCHEMA, "subcommand": subcommand, "config": config,
                "inputs": digests, "seed": seed, "tool_version": __version__,
                "wall_time": round(wall_time, 3)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _write(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text)


def _floats(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _parse_stop_line(text: str) -> tuple[str, StopLine]:
    try:
        lane, rest = text.split(":", 1)
        vals = _floats(rest)
        return lane, StopLine(*vals)
    except (ValueError, TypeError):
        raise UsageError(f"bad stop line {text!r}; use LANE:x[,y[,ux,uy]]") from None


def load_pairs(path) -> list[LeaderFollowerPair]:
    data = json.loads(Path(path).read_text())
    items = data["pairs"] if isinstance(data, dict) else data
    return [LeaderFollowerPair.from_dict(d) for d in items]


def save_pairs(pairs, path) -> None:
    Path(path).write_text(json.dumps({"pairs": [p.to_dict() for p in pairs]}, sort_keys=True) + "\n")


def _on_grid(pair: LeaderFollowerPair, dt: float) -> LeaderFollowerPair:
    if abs(pair.dt - dt) < 1e-9:
        return pair
    t0, t1 = pair.t_start, pair.t_end
    f = resample(pair.follower, dt, t0, t1)
    lead = None if pair.leader is None else resample(pair.leader, dt, t0, t1)
    return LeaderFollowerPair(f, lead, pair.is_free_leader, pair.lane_id, pair.v_limit,
                              pair.stop_position, pair.green_time)


def load_fleet(path) -> list[ParameterSet]:
    data = json.loads(Path(path).read_text())
    items = data if isinstance(data, list) else data.get("fleet", [data])
    fleet = []
    for d in items:
        if "best_params" in d:
            if d["best_params"] is not None:
                fleet.append(ParameterSet.from_dict(d["best_params"]))
        else:
            fleet.append(ParameterSet.from_dict(d))
    if not fleet:
        raise ConfigurationError("parameter file holds no parameter sets")
    return fleet


def _jobs(value) -> int:
    if value is not None:
        return max(1, int(value))
    env = os.environ.get(JOBS_ENV)
    return max(1, int(env)) if env else 1


# --------------------------------------------------------------------------- subcommands


def cmd_select(args, out: Path) -> dict:
    tracks, bad = read_tracks(args.input)
    lanes = [s for s in args.lanes.split(",") if s] if args.lanes else None
    lines = dict(_parse_stop_line(s) for s in args.stop_line or [])
    cfg = SelectionConfig(v_stop=args.v_stop, min_stop_duration=args.min_stop_duration,
                          dt=args.dt, v_limit=args.speed_limit)
    res = select_candidates(tracks, lanes, lines, cfg)
    save_pairs(res.pairs, out / "pairs.json")
    report = res.report()
    report["unreadable"] = dict(sorted(bad.items()))
    report["pair_ids"] = [p.pair_id for p in res.pairs]
    _write(out, "rejections.json", json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(f"selected {len(res.pairs)} pairs, rejected {len(res.rejected)} tracks")
    return {"input": args.input}


def cmd_calibrate(args, out: Path) -> dict:
    if args.model == "eidm_sched" and not args.schedule_breakpoints:
        raise UsageError("--model eidm_sched needs --schedule-breakpoints")
    speeds = _floats(args.schedule_breakpoints) if args.schedule_breakpoints else None
    pairs = [_on_grid(p, args.dt) for p in load_pairs(args.pairs)]
    pop = args.pop if args.pop is not None else DEFAULTS[f"{args.algo}_pop"]
    iters = args.iters if args.iters is not None else DEFAULTS[f"{args.algo}_iters"]
    args.pop, args.iters = pop, iters  # recorded in the manifest
    if args.algo == "de" and pop < 4:
        raise ConfigurationError("population too small: differential evolution needs pop >= 4")
    jobs = _jobs(args.jobs)
    results: list[CalibrationResult] = []
    timings = []
    for k, pair in enumerate(pairs):
        r = calibrate_pair(pair, args.model, args.algo, pop, iters, args.seed + k, speeds, jobs=jobs)
        results.append(r)
        timings.append(r.wall_time)
        print(f"{pair.pair_id}: rmse {r.gof:.4f} m ({r.evaluations} evaluations)")
    _write(out, "results.json", results_to_json(results) + "\n")
    _write(out, "summary.json", json.dumps(summarize(results), indent=1, sort_keys=True) + "\n")
    return {"pairs": args.pairs}


SCENARIOS = {"queue": queue_scenario, "ring": ring_scenario, "stopgo": stopgo_scenario}


def cmd_simulate(args, out: Path) -> dict:
    if args.scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {args.scenario!r}")
    fleet = load_fleet(args.params) if args.params else [default_parameters(args.model)]
    kw = {"dt": args.dt}
    if args.duration is not None:
        kw["duration"] = args.duration
    cfg = SCENARIOS[args.scenario](fleet, **kw)
    if args.record_interval is not None:
        cfg.record_interval = args.record_interval
    records = open(out / "records.csv", "w", newline="")
    records.write(",".join(RECORD_FIELDS) + "\n")

    def sink(chunk):
        write_records(records, chunk, header=False)

    try:
        sim_log = run_scenario(cfg, args.seed, sink=sink)
    finally:
        records.close()
    sim_log.save(out, records=False)
    print(f"{args.scenario}: {sim_log.count('collision')} collisions, "
          f"{sim_log.count('emergency_stop')} emergency stops")
    return {"params": args.params} if args.params else {}


def cmd_analyze(args, out: Path) -> dict:
    src = Path(args.log)
    if not (src / "scenario.json").exists():
        raise UsageError(f"{src} is not a simulation output directory")
    sim_log = SimulationLog.load(src)
    limit = sim_log.config.speed_limit
    if args.report == "fd":
        pts = fundamental_diagram(sim_log)
        _write(out, "fd_points.csv", fd_csv(pts))
        cd = capacity_drop(pts, limit)
        _write(out, "metrics.json", metrics_json({"capacity_drop": cd.drop if cd.valid else None,
                                                  "q_free_max": cd.q_free_max,
                                                  "q_discharge": cd.q_discharge,
                                                  "breakdown_time": cd.breakdown_time,
                                                  "n_points": len(pts)}))
    elif args.report == "wave":
        est = wave_speed(sim_log, v_c=args.v_c, edge=args.edge)
        _write(out, "wave.csv", wave_csv(est))
        _write(out, "metrics.json", metrics_json({"wave": est.to_dict(),
                                                  "reference_band": [4.17, 5.56]}))
    elif args.report == "queue":
        if sim_log.config.signal_plan is None:
            raise UsageError("queue report needs a signalized scenario log")
        stats = queue_discharge_stats(sim_log)
        _write(out, "queue_stats.csv", queue_csv(stats))
        _write(out, "metrics.json", metrics_json({"per_position": stats.per_position()}))
    else:
        _write(out, "metrics.json", metrics_json(scenario_metrics(sim_log)))
    return {"log": args.log}


def cmd_sensitivity(args, out: Path) -> dict:
    if args.ishigami:
        lb, ub = [-np.pi] * 3, [np.pi] * 3
        names = ("x1", "x2", "x3")
        if args.method == "sobol":
            rep = sobol_total_order(ishigami, lb, ub, args.samples, args.seed, names)
        else:
            rep = oat_sensitivity(ishigami, lb, ub, [0.0] * 3, args.grid, names)
        rep.extra["analytic_total"] = [float(v) for v in ishigami_total_indices()]
        inputs = {}
    else:
        if not args.pairs:
            raise UsageError("--pairs is required unless --ishigami is given")
        pairs = [_on_grid(p, args.dt) for p in load_pairs(args.pairs)][: args.max_pairs]
        if not pairs:
            raise ConfigurationError("no pairs to analyse")
        jobs = _jobs(args.jobs)
        parts = [pair_objective(p, args.model, not args.exclude_amax, jobs=jobs) for p in pairs]
        space = parts[0][1]

        def objective(X):
            return np.mean([obj(X) for obj, _, _ in parts], axis=0)

        baseline = np.mean([x0 for _, _, x0 in parts], axis=0)
        lb, ub = space.bounds.lb, space.bounds.ub
        if args.method == "sobol":
            rep = sobol_total_order(objective, lb, ub, args.samples, args.seed, space.names)
        else:
            rep = oat_sensitivity(objective, lb, ub, baseline, args.grid, space.names)
        inputs = {"pairs": args.pairs}
    rep.extra["recommended"] = rank_parameters(rep, args.threshold)
    _write(out, "sensitivity.json", rep.to_json() + "\n")
    _write(out, "sensitivity.csv", rep.to_csv())
    return inputs


def cmd_synth(args, out: Path) -> dict:
    from .synthetic import drive_off_corpus, tracks_from_log

    if args.kind == "pairs":
        corpus = drive_off_corpus(args.n, args.seed, schedule=args.schedule)
        save_pairs([p for p, _ in corpus], out / "pairs.json")
        _write(out, "truth.json", json.dumps([t.to_dict() for _, t in corpus], indent=1,
                                             sort_keys=True) + "\n")
    else:
        cfg = queue_scenario([default_parameters("eidm")], duration=args.duration or 200.0,
                             record_interval=0.04, dt=0.04)
        sim_log = run_scenario(cfg, args.seed)
        write_tracks(tracks_from_log(sim_log), out / "tracks.csv")
        _write(out, "stop_line.txt", f"1:{cfg.signal_plan.stop_line}\n")
    return {}


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfcalib", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help="JSON file with option defaults")
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    s = sub.add_parser("select", help="extract leader-follower pairs from tracks")
    common(s, seed=False)
    s.add_argument("--input", required=True)
    s.add_argument("--lanes", default=None, help="comma-separated lane ids")
    s.add_argument("--stop-line", action="append", help="LANE:x[,y[,ux,uy]] (repeatable)")
    s.add_argument("--dt", type=float, default=None)
    s.add_argument("--v-stop", type=float, default=None)
    s.add_argument("--min-stop-duration", type=float, default=None)
    s.add_argument("--speed-limit", type=float, default=None)

    s = sub.add_parser("calibrate", help="calibrate a model per pair")
    common(s)
    s.add_argument("--pairs", required=True)
    s.add_argument("--model", choices=["krauss", "idm", "iidm", "eidm", "eidm_sched"], default="eidm")
    s.add_argument("--schedule-breakpoints", default=None, help="e.g. 5,12")
    s.add_argument("--algo", choices=["de", "ga"], default="de")
    s.add_argument("--pop", type=int, default=None)
    s.add_argument("--iters", type=int, default=None)
    s.add_argument("--dt", type=float, default=None)
    s.add_argument("--jobs", type=int, default=None)

    s = sub.add_parser("simulate", help="run a scenario")
    common(s)
    s.add_argument("--scenario", required=True)
    s.add_argument("--params", default=None, help="calibration results or parameter sets (JSON)")
    s.add_argument("--model", choices=["krauss", "idm", "iidm", "eidm"], default="eidm")
    s.add_argument("--duration", type=float, default=None)
    s.add_argument("--dt", type=float, default=None)
    s.add_argument("--record-interval", type=float, default=None)

    s = sub.add_parser("analyze", help="macroscopic analysis of a simulation output")
    common(s, seed=False)
    s.add_argument("--log", required=True)
    s.add_argument("--report", choices=["fd", "wave", "queue", "metrics"], required=True)
    s.add_argument("--v-c", type=float, default=None)
    s.add_argument("--edge", choices=["head", "tail"], default="head")

    s = sub.add_parser("sensitivity", help="parameter sensitivity of the calibration objective")
    common(s)
    s.add_argument("--pairs", default=None)
    s.add_argument("--model", choices=["krauss", "idm", "iidm", "eidm"], default="eidm")
    s.add_argument("--method", choices=["oat", "sobol"], default="sobol")
    s.add_argument("--samples", type=int, default=None)
    s.add_argument("--grid", type=int, default=None)
    s.add_argument("--threshold", type=float, default=None)
    s.add_argument("--exclude-amax", action="store_true")
    s.add_argument("--max-pairs", type=int, default=5)
    s.add_argument("--dt", type=float, default=None)
    s.add_argument("--ishigami", action="store_true", help="self-test on the Ishigami function")
    s.add_argument("--jobs", type=int, default=None)

    s = sub.add_parser("synth", help="write synthetic pairs or tracks")
    common(s)
    s.add_argument("--kind", choices=["pairs", "tracks"], default="pairs")
    s.add_argument("--n", type=int, default=20)
    s.add_argument("--schedule", action="store_true")
    s.add_argument("--duration", type=float, default=None)
    return p


FALLBACKS = {
    "seed": 0,
    "dt": None,
    "v_stop": DEFAULTS["v_stop"],
    "min_stop_duration": DEFAULTS["min_stop_duration"],
    "speed_limit": DEFAULTS["speed_limit"],
    "v_c": DEFAULTS["wave_v_c"],
    "samples": DEFAULTS["sobol_samples"],
    "grid": DEFAULTS["oat_grid"],
    "threshold": DEFAULTS["rank_threshold"],
}
DT_DEFAULT = {"select": DEFAULTS["dt"], "calibrate": DEFAULTS["dt"], "sensitivity": DEFAULTS["dt"],
              "simulate": DEFAULTS["scenario_dt"]}
EXECUTION_ONLY = {"jobs", "verbose", "out", "config", "command"}


def resolve(args) -> argparse.Namespace:
    """Fill unset options: flag > config file > built-in default."""
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
    for key, value in vars(args).items():
        if value is None and key in file_cfg:
            setattr(args, key, file_cfg[key])
    for key, value in FALLBACKS.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, DT_DEFAULT.get(args.command) if key == "dt" else value)
    return args


COMMANDS = {"select": cmd_select, "calibrate": cmd_calibrate, "simulate": cmd_simulate,
            "analyze": cmd_analyze, "sensitivity": cmd_sensitivity, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        args = resolve(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            inputs = COMMANDS[args.command](args, out)
        config = {k: v for k, v in sorted(vars(args).items()) if k not in EXECUTION_ONLY}
        write_manifest(out, args.command, config, inputs, getattr(args, "seed", None),
                       time.perf_counter() - start)
    except (UsageError, ConfigurationError, SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime fault
        log.debug("runtime fault", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
