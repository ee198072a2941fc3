"""Command-line front end: scenario runs, simulation export, two-stage runs.

Subcommands
-----------
run        execute (method x seed) calibration runs from a JSON config,
           writing per-run CSV/JSON plus plot-ready aggregates
simulate   write a trajectory CSV for a rate specification
twostage   run the two-stage neural-rate calibration
verify     recompute aggregates from per-run CSVs and compare byte-exactly

Exit codes: 0 success, 1 run/verification failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .acquisition import DG_CF, EI, KG, KG_CF, KG_FN, KINDS, AcquisitionSpec, all_z_subsets
from .calibrate import (
    Bounds,
    TwoStageConfig,
    log_mse,
    run_bo,
    run_two_stage,
)
from .dataio import (
    GROUND_TRUTHS,
    LINEAR_GT,
    NONLINEAR_LAMBDA_GT,
    ScenarioSpec,
    calibration_model,
    ground_truth_rates,
    load_covid_csv,
    logmse_of_trajectory,
    make_scenario,
    pointwise_quarantine_rate,
    synthetic_infectious_series,
)
from .ode import CompartmentState, RateSpec, TimeGrid, simulate

DEFAULT_METHODS = (EI, KG, KG_CF, KG_FN, DG_CF)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)

PROFILES = ("fast", "full")


class ConfigError(Exception):
    pass


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def _worker_count(n_tasks: int) -> int:
    env = os.environ.get("EPICALIB_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError(f"EPICALIB_THREADS={env!r} is not an integer") from None
        if cap < 1:
            raise ConfigError("EPICALIB_THREADS must be >= 1")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_tasks))


# ---------------------------------------------------------------------------
# Profiles and acquisition configuration


def profile_defaults(profile: str, kind: str) -> dict:
    """Acquisition/scenario knobs per execution profile.

    The fast profile observes every 3rd day (10 observed time points)
    and trims optimizer budgets; the full-network kind additionally gets
    a reduced restart and inner-sample budget, since its objective is an
    order of magnitude costlier per evaluation.
    """
    if profile == "full":
        return {"every_days": 1, "fit_restarts": 8, "acq": {}}
    acq = {"restarts": 3, "joint_maxiter": 40, "inner_maxiter": 40}
    if kind == KG_FN:
        acq = {"restarts": 2, "joint_maxiter": 20, "inner_maxiter": 30, "L": 64}
    return {"every_days": 3, "fit_restarts": 4, "acq": acq}


def build_acq_spec(kind: str, profile: str, overrides: dict, run_seed: int) -> AcquisitionSpec:
    kw = dict(profile_defaults(profile, kind)["acq"])
    kw.update(overrides or {})
    if kw.pop("full_z_enumeration", False):
        kw["z_subsets"] = all_z_subsets()
    if "z_subsets" in kw:
        kw["z_subsets"] = tuple(tuple(int(v) for v in z) for z in kw["z_subsets"])
    try:
        return AcquisitionSpec(kind, seed=run_seed, **kw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"acquisition: {err}") from None


# ---------------------------------------------------------------------------
# run subcommand


@dataclasses.dataclass
class RunConfig:
    scenario: ScenarioSpec
    methods: tuple
    iterations: int
    seeds: tuple
    profile: str
    output_dir: Path
    acq_overrides: dict
    fit_restarts: int

    @classmethod
    def from_json(cls, doc: dict, overrides: dict | None = None) -> "RunConfig":
        overrides = overrides or {}
        merged = dict(doc)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        profile = merged.get("profile", "fast")
        if profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {profile!r}")
        sc = dict(merged.get("scenario", {}))
        sc.setdefault("observation_every_days", profile_defaults(profile, EI)["every_days"])
        try:
            scenario = ScenarioSpec(**sc)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"scenario: {err}") from None
        methods = tuple(merged.get("methods", DEFAULT_METHODS))
        for m in methods:
            if m not in KINDS:
                raise ConfigError(f"unknown method {m!r}; choose from {KINDS}")
        if not methods:
            raise ConfigError("at least one method is required")
        seeds = tuple(int(s) for s in merged.get("seeds", DEFAULT_SEEDS))
        if not seeds:
            raise ConfigError("at least one seed is required")
        iterations = int(merged.get("iterations", 50))
        if iterations < 0:
            raise ConfigError("iterations must be >= 0")
        out = merged.get("output_dir")
        if not out:
            raise ConfigError("output_dir is required")
        fit_restarts = int(
            merged.get("fit_restarts", profile_defaults(profile, EI)["fit_restarts"])
        )
        return cls(
            scenario=scenario,
            methods=methods,
            iterations=iterations,
            seeds=seeds,
            profile=profile,
            output_dir=Path(out),
            acq_overrides=dict(merged.get("acquisition", {})),
            fit_restarts=fit_restarts,
        )

    def echo(self) -> dict:
        return {
            "scenario": dataclasses.asdict(self.scenario),
            "methods": list(self.methods),
            "iterations": self.iterations,
            "seeds": list(self.seeds),
            "profile": self.profile,
            "output_dir": str(self.output_dir),
            "acquisition": self.acq_overrides,
            "fit_restarts": self.fit_restarts,
        }


def run_dir(base: Path, method: str, seed: int) -> Path:
    return base / method / f"seed_{seed}"


def _write_run_csv(path: Path, dim: int, design_rows, iter_rows):
    header = (
        ["iter", "method"]
        + [f"x{i+1}" for i in range(dim)]
        + [f"z{i+1}" for i in range(4)]
        + ["acq", "objective", "best_logmse", "truth_logmse", "wall_ms"]
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in design_rows + iter_rows:
            writer.writerow([_fmt(v) for v in row])


def _execute_run(payload: dict) -> dict:
    """One (method, seed) calibration; runs inside a worker process."""
    cfg = RunConfig.from_json(payload["config"])
    method, seed = payload["method"], payload["seed"]
    scenario = make_scenario(cfg.scenario)
    model = calibration_model(scenario)
    spec = build_acq_spec(method, cfg.profile, cfg.acq_overrides, seed)
    t0 = time.perf_counter()
    state = run_bo(model, scenario.obs, spec, cfg.iterations, Bounds.unit(4), seed,
                   fit_restarts=cfg.fit_restarts)
    wall_s = time.perf_counter() - t0

    best_truth = -np.inf  # running best objective, truth-scored incumbent
    best_obj = -np.inf
    design_rows, iter_rows = [], []
    truth_curve = []
    n_design = len(state.history) - len(state.records)
    for i, (x, traj, metric) in enumerate(state.history):
        if metric.value > best_obj:
            best_obj = metric.value
            best_truth = logmse_of_trajectory(traj, scenario)
        truth_curve.append(best_truth)
        if i < n_design:
            design_rows.append(
                [0, method] + list(x) + [None] * 4
                + [None, metric.value, log_mse(best_obj), best_truth, None]
            )
    # wall_ms stays empty inside run.csv: per-run CSVs must be byte-identical
    # across reruns of the same config and seed. Timings live in summary.json.
    for rec, truth in zip(state.records, truth_curve[n_design:]):
        iter_rows.append(
            [rec.iteration, method] + list(rec.x) + list(rec.z)
            + [rec.acq_value, rec.objective_value, rec.best_logmse, truth, None]
        )

    out = run_dir(cfg.output_dir, method, seed)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_csv(out / "run.csv", 4, design_rows, iter_rows)

    final_truth = float(
        logmse_of_trajectory(calibration_model(scenario)(state.x_best), scenario)
    )
    summary = {
        "method": method,
        "seed": seed,
        "x_best": [float(v) for v in state.x_best],
        "final_truth_logmse": final_truth,
        "best_objective": float(best_obj),
        "n_queries": state.n_queries,
        "fallbacks": sum(1 for r in state.records if r.fallback),
        "wall_s": wall_s,
        "config": cfg.echo(),
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"method": method, "seed": seed, "final_truth_logmse": final_truth,
            "wall_s": wall_s}


def read_run_curve(path: Path):
    """Per-iteration truth log-MSE curve (iteration 0 = after the design)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    curve = {}
    for row in rows:
        curve[int(row["iter"])] = float(row["truth_logmse"])
    return [curve[i] for i in sorted(curve)]


def aggregate_from_runs(cfg_dict: dict):
    """Rebuild the aggregate tables from the per-run CSV/JSON artifacts."""
    cfg = RunConfig.from_json(cfg_dict)
    agg_rows = [["method", "iteration", "logmse_mean", "logmse_sd"]]
    agg_json = {}
    for method in cfg.methods:
        curves, finals, walls, recs = [], [], [], []
        for seed in cfg.seeds:
            out = run_dir(cfg.output_dir, method, seed)
            curves.append(read_run_curve(out / "run.csv"))
            with open(out / "summary.json", encoding="utf-8") as fh:
                summary = json.load(fh)
            finals.append(summary["final_truth_logmse"])
            walls.append(summary["wall_s"])
            recs.append(summary["x_best"])
        curves = np.array(curves)  # (n_seeds, N+1)
        for it in range(curves.shape[1]):
            agg_rows.append([
                method, it,
                repr(float(curves[:, it].mean())),
                repr(float(curves[:, it].std())),
            ])
        agg_json[method] = {
            "final_logmse_mean": float(np.mean(finals)),
            "final_logmse_sd": float(np.std(finals)),
            "final_logmse_per_seed": [float(v) for v in finals],
            "recommendations": recs,
            "wall_s_mean": float(np.mean(walls)),
            "wall_s_total": float(np.sum(walls)),
        }
    return agg_rows, agg_json


def _render_csv(rows) -> str:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def cmd_run(args) -> int:
    try:
        doc = _load_json(args.config)
        overrides = {
            "output_dir": args.out,
            "profile": args.profile,
            "iterations": args.iters,
            "methods": [args.method] if args.method else None,
            "seeds": [args.seed] if args.seed is not None else None,
        }
        cfg = RunConfig.from_json(doc, overrides)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    cfg_dict = cfg.echo()
    with open(cfg.output_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg_dict, fh, indent=2, sort_keys=True)
        fh.write("\n")

    tasks = [
        {"config": cfg_dict, "method": m, "seed": s}
        for m in cfg.methods
        for s in cfg.seeds
    ]
    failures = 0
    workers = _worker_count(len(tasks))
    if workers == 1:
        results = []
        for t in tasks:
            results.append(_run_guarded(t))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_guarded, tasks))
    for task, res in zip(tasks, results):
        if isinstance(res, str):
            failures += 1
            print(f"FAILED {task['method']} seed {task['seed']}: {res}", file=sys.stderr)
        else:
            print(
                f"done {res['method']:6s} seed {res['seed']}: "
                f"final log10 MSE {res['final_truth_logmse']:.3f} "
                f"({res['wall_s']:.1f}s)"
            )
    if failures:
        return 1
    agg_rows, agg_json = aggregate_from_runs(cfg_dict)
    (cfg.output_dir / "aggregate.csv").write_text(_render_csv(agg_rows), encoding="utf-8")
    with open(cfg.output_dir / "aggregate.json", "w", encoding="utf-8") as fh:
        json.dump(agg_json, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def _run_guarded(task):
    try:
        return _execute_run(task)
    except Exception as err:  # noqa: BLE001 - reported per task, run keeps going
        return f"{type(err).__name__}: {err}"


def cmd_verify(args) -> int:
    base = Path(args.out)
    try:
        with open(base / "config.json", encoding="utf-8") as fh:
            cfg_dict = json.load(fh)
    except OSError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    agg_rows, agg_json = aggregate_from_runs(cfg_dict)
    stored_csv = (base / "aggregate.csv").read_text(encoding="utf-8")
    fresh_csv = _render_csv(agg_rows)
    stored_json = (base / "aggregate.json").read_text(encoding="utf-8")
    fresh_json = json.dumps(agg_json, indent=2, sort_keys=True) + "\n"
    if stored_csv != fresh_csv or stored_json != fresh_json:
        print("aggregate mismatch: stored files differ from recomputation",
              file=sys.stderr)
        return 1
    print("aggregates verified: byte-identical recomputation")
    return 0


# ---------------------------------------------------------------------------
# simulate subcommand


def cmd_simulate(args) -> int:
    try:
        if args.x is not None and args.ground_truth is not None:
            raise ConfigError("give either --x or --ground-truth, not both")
        if args.x is not None:
            spec = RateSpec.from_point(np.asarray(args.x, dtype=float))
        else:
            name = args.ground_truth or LINEAR_GT
            if name not in GROUND_TRUTHS:
                raise ConfigError(f"ground truth must be one of {GROUND_TRUTHS}")
            spec = ground_truth_rates(name)
        if args.dt <= 0 or args.horizon <= 0 or args.every_days < 1:
            raise ConfigError("horizon, dt must be positive; every-days >= 1")
        grid = TimeGrid.every_n_days(args.every_days, horizon=args.horizon, dt=args.dt)
    except (ConfigError, ValueError) as err:
        print(f"flag error: {err}", file=sys.stderr)
        return 2
    traj = simulate(spec, CompartmentState(0.99, 0.01, 0.0, 0.0), grid)
    header = ["t", "S", "I", "Q", "R"]
    columns = [traj.times] + [traj.column(c) for c in "SIQR"]
    if args.emit_lambda:
        header.append("lambda")
        columns.append(pointwise_quarantine_rate(traj, spec))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in zip(*columns):
            writer.writerow([_fmt(float(v)) for v in row])
    print(f"wrote {traj.states.shape[0]} rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# twostage subcommand


def cmd_twostage(args) -> int:
    try:
        doc = _load_json(args.config)
        out = Path(args.out or doc.get("output_dir") or "")
        if not str(out):
            raise ConfigError("output_dir is required")
        series = _twostage_series(doc)
        stage1 = dict(doc.get("stage1", {}))
        kind = stage1.pop("kind", KG_CF)
        if kind not in KINDS:
            raise ConfigError(f"unknown stage-1 method {kind!r}")
        iters = int(stage1.pop("iterations", 50))
        profile = doc.get("profile", "fast")
        if profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}")
        seed = int(doc.get("seed", 0))
        spec = build_acq_spec(kind, profile, stage1, seed)
        config = TwoStageConfig(
            stage1_spec=spec,
            stage1_iters=iters,
            batch_size=int(doc.get("batch_size", 30)),
            total_iterations=int(doc.get("iterations", 2000)),
            learning_rate=float(doc.get("learning_rate", 5e-4)),
            window_days=int(doc.get("window_days", 30)),
            nn_init_seed=int(doc.get("nn_init_seed", 0)),
            seed=seed,
            fit_restarts=int(doc.get("fit_restarts",
                                     profile_defaults(profile, kind)["fit_restarts"])),
        )
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    result = run_two_stage(config, series)
    out.mkdir(parents=True, exist_ok=True)

    # Stage-1 BO log.
    state = result.stage1
    n_design = len(state.history) - len(state.records)
    design_rows = [
        [0, config.stage1_spec.kind] + list(x) + [None] * 4
        + [None, m.value, None, None, None]
        for x, _, m in state.history[:n_design]
    ]
    iter_rows = [
        [r.iteration, config.stage1_spec.kind] + list(r.x) + list(r.z)
        + [r.acq_value, r.objective_value, r.best_logmse, None, None]
        for r in state.records
    ]
    _write_run_csv(out / "stage1_run.csv", 6, design_rows, iter_rows)

    with open(out / "stage2_loss.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "window_loss"])
        for i, v in enumerate(result.losses):
            writer.writerow([i, _fmt(float(v))])

    # Final fitted-vs-observed infectious trajectory.
    horizon = float(series.size - 1)
    grid = TimeGrid.daily(horizon=horizon, dt=config.dt)
    init = CompartmentState(
        result.total_population - result.i0, result.i0, 0.0, 0.0,
        total=result.total_population,
    )
    fitted = simulate(RateSpec.neural(result.net, *result.rate_coeffs), init, grid)
    with open(out / "fitted.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "observed_I", "fitted_I"])
        for t, obs_v, fit_v in zip(fitted.times, series, fitted.column("I")):
            writer.writerow([_fmt(float(t)), _fmt(float(obs_v)), _fmt(float(fit_v))])

    summary = {
        "x_first": [float(v) for v in result.x_first.values],
        "rate_coeffs": [float(v) for v in result.rate_coeffs],
        "i0": result.i0,
        "total_population": result.total_population,
        "stage2_initial_loss": float(result.losses[0]) if result.losses.size else None,
        "stage2_final_loss": float(result.losses[-1]) if result.losses.size else None,
        "diverged": result.diverged,
        "diverged_step": result.diverged_step,
        "config": doc,
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"two-stage run complete; artifacts in {out}")
    return 0


def _twostage_series(doc: dict) -> np.ndarray:
    data = doc.get("data")
    if not isinstance(data, dict):
        raise ConfigError("data section is required")
    if "path" in data:
        path = Path(data["path"])
        if not path.exists():
            raise ConfigError(f"data file not found: {path}")
        series = load_covid_csv(path, data.get("country", "US"))
        return series.counts
    if "synthetic" in data:
        syn = dict(data["synthetic"])
        series, _ = synthetic_infectious_series(
            seed=int(syn.get("seed", 0)),
            days=int(syn.get("days", 365)),
            i0=float(syn.get("i0", 0.02)),
            total=float(syn.get("total", 1.0)),
        )
        return series
    raise ConfigError("data needs either a 'path' or a 'synthetic' block")


# ---------------------------------------------------------------------------


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as err:
        raise ConfigError(str(err)) from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}:{err.lineno}: {err.msg}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epicalib",
                                     description="SIQR model calibration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run calibration methods from a config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", help="override output directory")
    p_run.add_argument("--profile", choices=PROFILES)
    p_run.add_argument("--iters", type=int)
    p_run.add_argument("--method", help="run a single method")
    p_run.add_argument("--seed", type=int, help="run a single seed")
    p_run.set_defaults(func=cmd_run)

    p_sim = sub.add_parser("simulate", help="write a trajectory CSV")
    p_sim.add_argument("--ground-truth", dest="ground_truth")
    p_sim.add_argument("--x", nargs=4, type=float, metavar=("X1", "X2", "X3", "X4"))
    p_sim.add_argument("--horizon", type=float, default=30.0)
    p_sim.add_argument("--dt", type=float, default=0.05)
    p_sim.add_argument("--every-days", dest="every_days", type=int, default=1)
    p_sim.add_argument("--emit-lambda", dest="emit_lambda", action="store_true")
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=cmd_simulate)

    p_two = sub.add_parser("twostage", help="two-stage neural-rate calibration")
    p_two.add_argument("--config", required=True)
    p_two.add_argument("--out")
    p_two.set_defaults(func=cmd_twostage)

    p_ver = sub.add_parser("verify", help="recompute and compare aggregates")
    p_ver.add_argument("--out", required=True)
    p_ver.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
