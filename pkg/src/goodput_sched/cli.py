"""Command-line entry point: ``goodput-sched <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import autoscale as autoscale_mod
from .fitting import ProfilePoint, fit_throughput, rmsle
from .goodput import BatchConfig, GoodputError, ThroughputParams
from .sim import oracle
from .sim.fairness import run_with_fairness
from .sim.metrics import CSV_COLUMNS, TIMELINE_COLUMNS, MetricsReport, mean_ci
from .sim.profiles import THROUGHPUT_KEYS, ProfileError, ProfileLibrary, default_library
from .sim.simulator import POLICIES, SimConfig, SimulationError, run
from .workload import MODES, TraceJob, WorkloadError, WorkloadSpec, dump_trace, generate_trace, load_trace, synthesize

log = logging.getLogger("goodput_sched")

THREADS_ENV = "GOODPUT_SCHED_THREADS"
SUMMARY_KEYS = ("avg_jct", "p99_jct", "makespan", "avg_rho", "max_rho")
SWEEP_AXES = ("policy", "p", "interval", "slowdown", "load_multiplier")
DEFAULT_SEEDS = tuple(range(8))


class CliError(Exception):
    """A user-facing failure: printed without a traceback, exit status 1."""


# --- input -----------------------------------------------------------------------


def _read_json(path: Path):
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise CliError(f"{path}: no such file") from None
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def load_profiles(path: Optional[str]) -> ProfileLibrary:
    if path is None:
        return default_library()
    data = _read_json(Path(path))
    try:
        return ProfileLibrary.from_dict(data)
    except (ProfileError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path}: {exc}") from None


def _load_trace(path: Optional[str], seed: int, load_multiplier: float) -> tuple[list[TraceJob], bool]:
    """The trace to replay and whether it was generated here."""
    if path is None:
        return generate_trace(seed, load_multiplier=load_multiplier), True
    try:
        jobs = load_trace(path)
    except FileNotFoundError:
        raise CliError(f"{path}: no such file") from None
    # A supplied trace is intensified by compressing its arrival times.
    if load_multiplier != 1.0:
        jobs = [replace(j, submit_s=round(j.submit_s / load_multiplier, 3)) for j in jobs]
    return jobs, False


def _trace(args) -> tuple[list[TraceJob], bool]:
    return _load_trace(args.trace, args.seed, args.load_multiplier)


def _workload(trace: Sequence[TraceJob], profiles: ProfileLibrary, seed: int, policy: str, mode: str) -> WorkloadSpec:
    if policy == "pollux":
        mode = "pollux"
    elif mode == "pollux":
        raise CliError(f"the {policy} policy needs --mode tuned or realistic")
    return synthesize(trace, profiles, seed, mode)


def sim_config(args, **overrides) -> SimConfig:
    fields = dict(
        policy=args.policy,
        p=args.p,
        interval=args.interval,
        slowdown=args.slowdown,
        interference_avoidance=not args.no_interference_avoidance,
        seed=args.seed,
    )
    fields.update(overrides)
    try:
        return SimConfig(**fields)
    except (ValueError, SimulationError) as exc:
        raise CliError(str(exc)) from None


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


# --- output validation ----------------------------------------------------------------


def _check_csv(text: str, columns: Sequence[str], numeric: Sequence[str], optional: Sequence[str] = ()) -> str:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != tuple(columns):
        raise CliError(f"internal error: CSV header {rows[:1]} != {list(columns)}")
    idx = [columns.index(c) for c in numeric]
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(columns):
            raise CliError(f"internal error: CSV line {n} has {len(row)} fields")
        for i in idx:
            if row[i] == "" and columns[i] in optional:
                continue
            try:
                float(row[i])
            except ValueError:
                raise CliError(f"internal error: CSV line {n} column {columns[i]} is {row[i]!r}") from None
    return text


def check_summary(summary: dict) -> dict:
    if tuple(sorted(summary)) != tuple(sorted(SUMMARY_KEYS)):
        raise CliError(f"internal error: summary keys {sorted(summary)}")
    for k, v in summary.items():
        if v is not None and not (isinstance(v, float) and math.isfinite(v)):
            raise CliError(f"internal error: summary {k}={v!r}")
    return summary


def check_metrics_csv(text: str) -> str:
    return _check_csv(text, CSV_COLUMNS, CSV_COLUMNS[2:], optional=("start_s", "rho"))


def _write(out: Path, name: str, text: str) -> Path:
    path = out / name
    path.write_text(text)
    log.info("wrote %s", path)
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"{out}: cannot create output directory: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise CliError(f"{out}: output directory is not writable")
    return out


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _render(out: Path) -> None:
    from .plotting import render_dir

    for path in render_dir(out):
        log.info("wrote %s", path)


# --- commands --------------------------------------------------------------------------


def simulate_once(
    trace: Sequence[TraceJob], profiles: ProfileLibrary, cfg: SimConfig, mode: str, fairness: bool
) -> tuple[WorkloadSpec, MetricsReport]:
    workload = _workload(trace, profiles, cfg.seed, cfg.policy, mode)
    report = run_with_fairness(workload, profiles, cfg) if fairness else run(workload, profiles, cfg)
    return workload, report


def cmd_simulate(args) -> int:
    profiles = load_profiles(args.profiles)
    trace, generated = _trace(args)
    cfg = sim_config(args)
    out = _out_dir(args)
    try:
        workload, report = simulate_once(trace, profiles, cfg, args.mode, not args.no_fairness)
    except (WorkloadError, SimulationError, ProfileError) as exc:
        raise CliError(str(exc)) from None
    summary = check_summary(report.summary())
    if generated:
        _write(out, "trace.csv", dump_trace(trace))
    _write(out, "workload.json", workload.to_json() + "\n")
    _write(out, "metrics.csv", check_metrics_csv(report.to_csv()))
    _write(out, "timeline.csv", _check_csv(report.timeline_csv(), TIMELINE_COLUMNS, TIMELINE_COLUMNS))
    _write(out, "summary.json", _dump_json(summary))
    if args.plot:
        _render(out)
    sys.stdout.write(_dump_json(summary))
    return 0


def sweep_cells(axes: dict[str, Sequence]) -> list[dict]:
    """Cartesian product of the sweep axes, in declaration order."""
    for name in SWEEP_AXES:
        if name not in axes:
            raise CliError(f"sweep axis {name!r} missing")
        if len(axes[name]) == 0:
            raise CliError(f"sweep axis {name!r} is empty")
    return [dict(zip(SWEEP_AXES, values)) for values in itertools.product(*(axes[a] for a in SWEEP_AXES))]


def _sweep_run(task: tuple) -> dict:
    cell, seed, profiles_path, trace_path, mode, avoid, fairness = task
    profiles = load_profiles(profiles_path)
    trace, _ = _load_trace(trace_path, seed, cell["load_multiplier"])
    cfg = SimConfig(
        policy=cell["policy"],
        p=cell["p"],
        interval=cell["interval"],
        slowdown=cell["slowdown"],
        interference_avoidance=avoid,
        seed=seed,
    )
    _, report = simulate_once(trace, profiles, cfg, mode, fairness)
    return {**cell, "seed": seed, **report.summary()}


def cmd_sweep(args) -> int:
    cells = sweep_cells(
        {
            "policy": args.policy,
            "p": args.p,
            "interval": args.interval,
            "slowdown": args.slowdown,
            "load_multiplier": args.load_multiplier,
        }
    )
    if not args.seeds:
        raise CliError("need at least one seed")
    if args.profiles is not None:
        load_profiles(args.profiles)  # fail fast on a bad path
    if args.trace is not None:
        _load_trace(args.trace, 0, 1.0)
    out = _out_dir(args)
    tasks = [
        (cell, seed, args.profiles, args.trace, args.mode, not args.no_interference_avoidance, not args.no_fairness)
        for cell in cells
        for seed in args.seeds
    ]
    workers = min(thread_count(), len(tasks))
    try:
        if workers <= 1:
            results = [_sweep_run(t) for t in tasks]
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_sweep_run, tasks))
    except (WorkloadError, SimulationError, ProfileError) as exc:
        raise CliError(str(exc)) from None
    run_cols = SWEEP_AXES + ("seed",) + SUMMARY_KEYS
    _write(out, "sweep_runs.csv", _check_csv(_csv(run_cols, results), run_cols, run_cols[1:], optional=SUMMARY_KEYS))
    rows = []
    for i, cell in enumerate(cells):
        chunk = results[i * len(args.seeds) : (i + 1) * len(args.seeds)]
        row = dict(cell, runs=len(chunk))
        for key in SUMMARY_KEYS:
            values = [r[key] for r in chunk if r[key] is not None]
            mean, half = mean_ci(values) if values else (None, None)
            row[f"{key}_mean"] = None if mean is None else round(mean, 6)
            row[f"{key}_ci95"] = None if half is None else round(half, 6)
        rows.append(row)
    stat_cols = tuple(f"{k}_{s}" for k in SUMMARY_KEYS for s in ("mean", "ci95"))
    cols = SWEEP_AXES + ("runs",) + stat_cols
    text = _check_csv(_csv(cols, rows), cols, cols[1:], optional=stat_cols)
    _write(out, "sweep.csv", text)
    if args.plot:
        _render(out)
    sys.stdout.write(text)
    return 0


def _csv(columns: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns])
    return buf.getvalue()


def _points(rows: Sequence[dict], source: str) -> list[ProfilePoint]:
    points = []
    for i, r in enumerate(rows):
        missing = [k for k in THROUGHPUT_KEYS if k not in r]
        if missing:
            raise CliError(f"{source}: point {i} lacks {', '.join(missing)}")
        try:
            points.append(
                ProfilePoint(
                    oracle.spread(int(r["gpus"]), int(r["nodes"])),
                    BatchConfig(int(r["per_gpu_batch"]), int(r["accum_steps"])),
                    float(r["t_iter_seconds"]),
                )
            )
        except (GoodputError, ValueError, ZeroDivisionError) as exc:
            raise CliError(f"{source}: point {i}: {exc}") from None
    if not points:
        raise CliError(f"{source}: no profile points")
    return points


def cmd_fit(args) -> int:
    if args.points is not None:
        data = _read_json(Path(args.points))
        if not isinstance(data, list):
            raise CliError(f"{args.points}: expected a JSON list of throughput rows")
        rows, source, name = data, args.points, None
    else:
        profiles = load_profiles(args.profiles)
        name = args.model or (next(iter(profiles)) if len(profiles) == 1 else None)
        if name is None:
            raise CliError(f"--model is required; choose from {', '.join(sorted(profiles))}")
        try:
            rows, source = profiles.get_model(name).throughput, f"profile {name}"
        except ProfileError as exc:
            raise CliError(str(exc)) from None
    points = _points(rows, source)
    params = fit_throughput(points, seed=args.seed)
    result = {"model": name, "num_points": len(points), "params": params.to_dict(), "rmsle": rmsle(params, points)}
    if ThroughputParams.from_dict(json.loads(json.dumps(result["params"]))) != params:
        raise CliError("internal error: fitted parameters do not round-trip through JSON")
    text = _dump_json(result)
    if args.out is not None:
        _write(_out_dir(args), "fit.json", text)
    sys.stdout.write(text)
    return 0


def cmd_workload(args) -> int:
    profiles = load_profiles(args.profiles)
    trace, generated = _trace(args)
    out = _out_dir(args)
    try:
        workload = synthesize(trace, profiles, args.seed, args.mode)
    except WorkloadError as exc:
        raise CliError(str(exc)) from None
    if generated:
        _write(out, "trace.csv", dump_trace(trace))
    _write(out, "workload.json", workload.to_json() + "\n")
    counts: dict[str, int] = {}
    for job in workload.jobs:
        counts[job.model] = counts.get(job.model, 0) + 1
    sys.stdout.write(_dump_json({"jobs": len(workload.jobs), "mode": workload.mode, "models": counts}))
    return 0


def cmd_autoscale(args) -> int:
    profiles = load_profiles(args.profiles)
    try:
        profile = profiles.get_model(args.model)
    except ProfileError as exc:
        raise CliError(str(exc)) from None
    if args.phi_growth is not None:
        profile = autoscale_mod.rescale_phi(profile, args.phi_growth)
    out = _out_dir(args)
    modes = autoscale_mod.MODES if args.mode == "both" else (args.mode,)
    summary = {}
    for mode in modes:
        policy = autoscale_mod.AutoscalePolicy(
            gpus_per_node=args.gpus_per_node, price=args.price, mode=mode, max_nodes=args.max_nodes
        )
        report = autoscale_mod.simulate(profile, policy, interval=args.interval)
        cols = autoscale_mod.CSV_COLUMNS
        _write(out, f"autoscale_{mode}.csv", _check_csv(report.to_csv(), cols, cols))
        summary[mode] = {
            "completion_time": round(report.completion_time, 6),
            "node_hours": round(report.node_hours, 6),
            "cost": round(report.cost, 6),
            "final_nodes": int(report.nodes[-1]),
        }
    text = _dump_json(summary)
    _write(out, "autoscale_summary.json", text)
    if args.plot:
        _render(out)
    sys.stdout.write(text)
    return 0


def cmd_plot(args) -> int:
    out = Path(args.out)
    if not out.is_dir():
        raise CliError(f"{out}: no such directory")
    from .plotting import render_dir

    made = render_dir(out)
    if not made:
        raise CliError(f"{out}: no metrics, timeline, sweep or autoscale CSVs to plot")
    for path in made:
        print(path)
    return 0


# --- parser ----------------------------------------------------------------------------


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profiles", help="profile library JSON (default: bundled synthetic profiles)")
    common.add_argument("--seed", type=_seed, default=0)
    common.add_argument("-v", "--verbose", action="count", default=0)

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--no-interference-avoidance", action="store_true")
    sim.add_argument("--mode", choices=MODES[1:], default="tuned", help="job configuration for baseline policies")
    sim.add_argument("--no-fairness", action="store_true", help="skip the isolated runs behind rho")
    sim.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSVs")

    parser = argparse.ArgumentParser(prog="goodput-sched", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common, sim], help="replay one trace under one policy")
    p.add_argument("--policy", choices=POLICIES, default="pollux")
    p.add_argument("--p", type=float, default=-1.0, help="fairness exponent")
    p.add_argument("--interval", type=float, default=60.0, help="scheduling interval (s)")
    p.add_argument("--slowdown", type=float, default=0.0, help="interference slowdown fraction")
    p.add_argument("--trace", help="trace CSV (default: generate one from --seed)")
    p.add_argument("--load-multiplier", type=float, default=1.0)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", parents=[common, sim], help="cartesian sweep averaged over seeded traces")
    p.add_argument("--policy", nargs="+", choices=POLICIES, default=["pollux"])
    p.add_argument("--p", nargs="+", type=float, default=[-1.0])
    p.add_argument("--interval", nargs="+", type=float, default=[60.0])
    p.add_argument("--slowdown", nargs="+", type=float, default=[0.0])
    p.add_argument("--load-multiplier", nargs="+", type=float, default=[1.0])
    p.add_argument("--seeds", nargs="+", type=_seed, default=list(DEFAULT_SEEDS))
    p.add_argument("--trace", help="trace CSV shared by every seed (default: one generated trace per seed)")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit", parents=[common], help="fit throughput parameters to profile points")
    p.add_argument("--points", help="JSON list of throughput rows")
    p.add_argument("--model", help="profile to fit when reading a library")
    p.add_argument("--out", help="also write fit.json here")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("workload", parents=[common], help="generate a trace and synthesize its workload")
    p.add_argument("--mode", choices=MODES, default="pollux")
    p.add_argument("--trace", help="trace CSV (default: generate one from --seed)")
    p.add_argument("--load-multiplier", type=float, default=1.0)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_workload)

    p = sub.add_parser("autoscale", parents=[common], help="goodput vs throughput autoscaling for one job")
    p.add_argument("--model", default="imagenet")
    p.add_argument("--mode", choices=autoscale_mod.MODES + ("both",), default="both")
    p.add_argument("--phi-growth", type=float, help="rescale the noise scale to grow by this factor")
    p.add_argument("--interval", type=float, default=60.0)
    p.add_argument("--price", type=float, default=1.0, help="per node-hour")
    p.add_argument("--gpus-per-node", type=int, default=4)
    p.add_argument("--max-nodes", type=int, default=16)
    p.add_argument("--plot", action="store_true")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_autoscale)

    p = sub.add_parser("plot", help="render PNG figures from the CSVs in a directory")
    p.add_argument("--out", default="out")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    try:
        return args.func(args)
    except (CliError, autoscale_mod.AutoscaleError, GoodputError, ProfileError, SimulationError, WorkloadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
