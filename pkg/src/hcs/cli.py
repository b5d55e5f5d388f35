"""``hcs`` command line: steer, simulate, verify.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 failed verification.
Errors are printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .errors import HcsError
from .io import (
    RunManifest,
    load_npz,
    save_npz,
    to_jsonable,
    write_event_csv,
    write_json,
    write_timeseries_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4
CONFIG_KINDS = {"config-error", "dimension-mismatch", "unknown-mode", "invalid-grid", "not-positive-definite"}
HINTS = {"noninvertible-saltation": "the saltation matrix is not square or is ill-conditioned; rerun with --method sdp"}

log = logging.getLogger("hcs")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__

        return __version__


def _fmt(a: np.ndarray) -> str:
    return np.array2string(np.asarray(a), precision=6, suppress_small=False, max_line_width=120)


# ------------------------------------------------------------------ steer


def _config_from_args(args) -> dict:
    from .pipeline import resolve_config

    return resolve_config(experiment=args.experiment, config_path=args.config, eta=args.eta, tol=args.tol,
                          max_iter=args.max_iter)


def cmd_steer(args) -> int:
    from .pipeline import plan_to_arrays, run_steer, summarize

    cfg = _config_from_args(args)
    cfg["method"] = args.method or cfg.get("method", "auto")
    start = time.perf_counter()
    outcome = run_steer(cfg, cfg["method"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(outcome)
    timings = summary.pop("timings")

    manifest = RunManifest("steer", cfg["experiment"], cfg, _version(), argv=sys.argv[1:])
    written = [write_json(out / "summary.json", summary)]
    written.append(write_json(out / "sigma_minus.json", [j.sigma_minus for j in outcome.solution.jumps]))
    written.append(write_json(out / "sigma_plus.json", [j.sigma_plus for j in outcome.solution.jumps]))
    arrays = {}
    for j, seg in enumerate(outcome.solution.segments):
        arrays |= {f"seg{j}_times": seg.times, f"seg{j}_pi": seg.pi, f"seg{j}_h": seg.h,
                   f"seg{j}_sigma": seg.sigma, f"seg{j}_gains": seg.gains}
    written.append(save_npz(out / "solution.npz", arrays))
    written.append(save_npz(out / "plan.npz", plan_to_arrays(outcome.feedback_plan(), cfg)))
    baseline = outcome.baseline_plan()
    if baseline is not None:
        written.append(save_npz(out / "plan_baseline.npz", plan_to_arrays(baseline, cfg)))
        b = outcome.nominal.bundle
        written.append(save_npz(out / "nominal.npz", {"times": b.times, "states": b.states, "controls": b.controls,
                                                     "modes": b.modes, "segment": b.segment}))
    for path in written:
        manifest.add_artifact(out, path)
    manifest.timings = timings | {"total": time.perf_counter() - start}
    manifest.write(out)

    print(f"experiment {cfg['experiment']}  method {outcome.method}  segments {summary['segments']}")
    for j in summary["jumps"]:
        print(f"jump {j['index']} at t={j['time']:.6f}")
        print(f"  Sigma- =\n{_fmt(j['sigma_minus'])}")
        print(f"  Sigma+ =\n{_fmt(j['sigma_plus'])}")
        print(f"  rank(Sigma+) = {j['sigma_plus_rank']}  lambda_min/lambda_max = {j['sigma_plus_eigen_ratio']:.3e}")
        line = f"  |Sigma+ - Xi Sigma- Xi'| = {j['sigma_jump_residual']:.3e}"
        if "pi_jump_residual" in j:
            line += f"  Xi' Pi+ Xi vs Pi- = {j['pi_jump_residual']:.3e}"
        print(line)
    print(f"objective {summary['objective']:.10g}")
    if "kkt_residual" in summary:
        print(f"newton decrement {summary['kkt_residual']:.3e}  iterations {summary['iterations']}")
    print(f"terminal error {summary['terminal_error']:.3e}  initial error {summary['initial_error']:.3e}")
    print(f"wrote {out}")
    return EXIT_OK


# ------------------------------------------------------------------ simulate


def cmd_simulate(args) -> int:
    from .pipeline import build_system, plan_from_arrays
    from .sim_harness import SimConfig, simulate_ensemble

    plan, cfg = plan_from_arrays(load_npz(args.plan))
    out = Path(args.out)
    sim = dict(cfg.get("simulation", {}))
    for key, value in (("samples", args.samples), ("seed", args.seed), ("threads", args.threads),
                       ("epsilon", args.epsilon), ("thinning", args.thinning)):
        if value is not None:
            sim[key] = value
    sim.setdefault("epsilon", float(cfg["epsilon"]))
    config = SimConfig(int(sim.get("samples", 1000)), master_seed=int(sim.get("seed", 0)),
                       epsilon=float(sim["epsilon"]), thinning=int(sim.get("thinning", 1)),
                       threads=int(sim.get("threads", 1)), sample_initial=not args.fixed_start)
    system = build_system(cfg)
    start = time.perf_counter()
    ens = simulate_ensemble(system, plan, config)
    elapsed = time.perf_counter() - start
    out.mkdir(parents=True, exist_ok=True)

    report = {k: v for k, v in ens.report.items() if k != "per_time_deviation"}
    nominal_end = plan.x_ref[-1, -1, : ens.terminal_states.shape[1]]
    if len(ens.terminal_states):
        report["terminal_mean"] = ens.terminal_states.mean(axis=0)
        report["terminal_mean_offset"] = float(np.linalg.norm(report["terminal_mean"] - nominal_end))
    report |= {"plan": plan.label, "nominal_terminal_state": nominal_end, "terminal_covariance": ens.terminal_covariance,
               "event_count_histogram": np.bincount(ens.event_counts).tolist()}
    written = [
        write_timeseries_csv(out / "ensemble.csv", ens.times, ens.mean, np.nan_to_num(ens.covariance, nan=0.0)),
        write_event_csv(out / "events.csv", ens.event_times),
        write_json(out / "report.json", report),
    ]
    if "per_time_deviation" in ens.report:
        dev = ens.report["per_time_deviation"]
        path = out / "deviation.csv"
        path.write_text("t,deviation\n" + "".join(f"{t!r},{'' if not np.isfinite(d) else repr(float(d))}\n"
                                                   for t, d in zip(ens.times.tolist(), dev)))
        written.append(path)
    run_cfg = cfg | {"simulation": sim | {"fixed_start": args.fixed_start}, "plan_file": str(args.plan)}
    manifest = RunManifest("simulate", cfg.get("experiment", "custom"), run_cfg, _version(), argv=sys.argv[1:])
    for path in written:
        manifest.add_artifact(out, path)
    manifest.timings = {"simulate": elapsed}
    manifest.write(out)

    print(f"{plan.label}: {ens.sample_count} samples, eps={config.epsilon}, escaped {ens.escape_rate:.2%}")
    if "terminal_mean_offset" in report:
        print(f"terminal mean offset from the nominal {report['terminal_mean_offset']:.3e}")
    print(f"terminal covariance =\n{_fmt(ens.terminal_covariance)}")
    td = report.get("terminal_deviation", float("nan"))
    print(f"terminal deviation ||S_hat - S_T||_F / ||S_T||_F = {td:.4f}")
    if "max_deviation" in report:
        print(f"max deviation from the planned schedule {report['max_deviation']:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


# ------------------------------------------------------------------ verify


def cmd_verify(args) -> int:
    from .verify import SUITES, format_table, run_suites

    names = list(SUITES) if args.suite == "all" else [args.suite]
    rows = run_suites(names, seed=args.seed, corrupt_phi12=args.corrupt_phi12)
    print(format_table(rows))
    failed = [r for r in rows if not r.passed]
    if args.out is not None:
        out = Path(args.out)
        path = write_json(out / "verify.json", [r.as_dict() for r in rows])
        manifest = RunManifest("verify", "verify", {"suites": names, "seed": args.seed,
                                                    "corrupt_phi12": args.corrupt_phi12}, _version(),
                               argv=sys.argv[1:])
        manifest.add_artifact(out, path)
        manifest.write(out)
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcs", description="Covariance steering for hybrid linear stochastic systems")
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    steer = sub.add_parser("steer", help="solve a steering problem and write its plan")
    src = steer.add_mutually_exclusive_group(required=True)
    src.add_argument("--experiment", choices=["bouncing-ball", "slip"])
    src.add_argument("--config", help="JSON run configuration (or a manifest from a previous run)")
    steer.add_argument("--method", choices=["auto", "analytic", "sdp"],
                       help="closed form, convex program, or auto (closed form when every jump is invertible)")
    steer.add_argument("--out", default="runs/steer")
    steer.add_argument("--eta", type=float, help="smallest regularization in the continuation schedule")
    steer.add_argument("--tol", type=float, help="Newton decrement tolerance of the convex solver")
    steer.add_argument("--max-iter", type=int, help="iteration cap for both iLQR and the convex solver")
    steer.set_defaults(func=cmd_steer)

    simulate = sub.add_parser("simulate", help="Monte-Carlo ensemble of a saved plan")
    simulate.add_argument("plan", help="plan.npz written by steer")
    simulate.add_argument("--samples", type=int)
    simulate.add_argument("--seed", type=int)
    simulate.add_argument("--threads", type=int)
    simulate.add_argument("--epsilon", type=float, help="noise level (default: the plan's)")
    simulate.add_argument("--thinning", type=int, help="record every k-th grid node")
    simulate.add_argument("--fixed-start", action="store_true",
                          help="start every sample at the nominal initial state instead of sampling Sigma0")
    simulate.add_argument("--out", default="runs/simulate")
    simulate.set_defaults(func=cmd_simulate)

    verify = sub.add_parser("verify", help="run the self-check suites")
    verify.add_argument("--suite", choices=["kernels", "riccati", "sdp", "all"], default="all")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--corrupt-phi12", action="store_true",
                        help="negative control: flip the sign of the upper-right kernel block")
    verify.add_argument("--out", help="also write verify.json and a manifest here")
    verify.set_defaults(func=cmd_verify)
    return parser


def _error(kind: str, message: str, code: int) -> int:
    payload = {"error": kind, "message": message, "exit_code": code}
    if kind in HINTS:
        payload["hint"] = HINTS[kind]
    sys.stderr.write(json.dumps(to_jsonable(payload)) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("HCS_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except HcsError as exc:
        return _error(exc.kind, exc.message, EXIT_CONFIG if exc.kind in CONFIG_KINDS else EXIT_SOLVER)
    except (OSError, ValueError) as exc:
        return _error("config-error", str(exc), EXIT_CONFIG)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        return _error("solver-failure", str(exc), EXIT_SOLVER)


if __name__ == "__main__":
    sys.exit(main())
