"""End-to-end steering pipeline shared by the command line and the tests.

A run configuration names a hybrid system, the boundary covariances, the noise
level and the nominal-trajectory settings. :func:`run_steer` optimizes the
nominal, linearizes along it and solves the covariance steering problem with
the closed form or the convex program.
"""

from __future__ import annotations

import copy
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import HcsError
from .hybrid_analytic import HybridSteeringSolution, steer_hybrid_analytic
from .hybrid_model import INVERTIBLE_COND, HybridSystemSpec, rollout_deterministic
from .io import as_matrix, read_json, to_jsonable
from .nominal_ilqr import EventSequenceWarning, IlqrConfig, LinearizedPlan, NominalPlan, linearize_along, solve_hilqr
from .sdp_steering import DEFAULT_ETAS, SdpProblem, recover_controllers, solve_sdp
from .sim_harness import FeedbackPlan, hcs_feedback_plan, ilqr_feedback_plan
from .smooth_steering import steer_smooth
from .systems import system_from_dict

log = logging.getLogger(__name__)

METHODS = ("auto", "analytic", "sdp")
PRESETS = {"bouncing-ball": "bouncing_ball.json", "slip": "slip.json"}
RANK_TOL = 1e-8


# ------------------------------------------------------------------ configs


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise HcsError("config-error", f"unknown experiment {name!r}; choose from {sorted(PRESETS)}")
    text = resources.files("hcs").joinpath("presets", PRESETS[name]).read_text()
    return json.loads(text)


def resolve_config(
    *,
    experiment: str | None = None,
    config_path: str | Path | None = None,
    config: dict | None = None,
    eta: float | None = None,
    tol: float | None = None,
    max_iter: int | None = None,
    samples: int | None = None,
    seed: int | None = None,
    threads: int | None = None,
) -> dict:
    """Merge a preset, a config file (or a run manifest) or a dict with overrides into one self-contained dict.

    ``eta`` sets the smallest regularization; the schedule keeps two larger
    values a factor of 100 apart for warm starts and extrapolation.
    """
    sources = [x is not None for x in (experiment, config_path, config)]
    if sum(sources) != 1:
        raise HcsError("config-error", "give exactly one of an experiment name, a config file or a config dict")
    if experiment is not None:
        cfg = load_preset(experiment)
    elif config_path is not None:
        cfg = read_json(config_path)
        if isinstance(cfg, dict) and "command" in cfg and "config" in cfg:
            cfg = cfg["config"]  # a run manifest: reuse the configuration it recorded
    else:
        cfg = config
    if not isinstance(cfg, dict):
        raise HcsError("config-error", "config must be a JSON object")
    cfg = copy.deepcopy(cfg)
    cfg.setdefault("experiment", experiment or (Path(config_path).stem if config_path else "custom"))
    for key in ("system", "sigma0", "sigma_t", "epsilon"):
        if key not in cfg:
            raise HcsError("config-error", f"config is missing {key!r}")
    sdp = cfg.setdefault("sdp", {})
    sdp.setdefault("eta_schedule", list(DEFAULT_ETAS))
    sdp.setdefault("tol", 1e-9)
    sdp.setdefault("max_iter", 200)
    nominal = cfg.setdefault("nominal", {})
    nominal.setdefault("method", "ilqr")
    sim = cfg.setdefault("simulation", {})
    sim.setdefault("samples", 1000)
    sim.setdefault("seed", 0)
    sim.setdefault("threads", 1)
    sim.setdefault("thinning", 1)
    if eta is not None:
        if eta <= 0:
            raise HcsError("config-error", "--eta must be positive")
        sdp["eta_schedule"] = [eta * 1e4, eta * 1e2, eta]
    if tol is not None:
        if tol <= 0:
            raise HcsError("config-error", "--tol must be positive")
        sdp["tol"] = tol
    if max_iter is not None:
        if max_iter < 1:
            raise HcsError("config-error", "--max-iter must be positive")
        sdp["max_iter"] = max_iter
        nominal["max_iterations"] = max_iter
    if samples is not None:
        sim["samples"] = samples
    if seed is not None:
        sim["seed"] = seed
    if threads is not None:
        sim["threads"] = threads
    return cfg


def build_system(cfg: dict) -> HybridSystemSpec:
    return system_from_dict(cfg["system"])


def _ilqr_config(nominal: dict, n_final: int) -> IlqrConfig:
    goal = nominal.get("goal")
    if goal is None:
        raise HcsError("config-error", "iLQR nominal needs a 'goal'")
    weight = as_matrix(nominal.get("terminal_weight", np.eye(n_final).tolist()), "terminal_weight")
    kwargs = {k: nominal[k] for k in ("control_weight", "max_iterations", "tolerance", "use_state_cost") if k in nominal}
    return IlqrConfig(goal=np.asarray(goal, dtype=float), terminal_weight=weight, **kwargs)


# ------------------------------------------------------------------ steering


@dataclass
class SteerOutcome:
    config: dict
    system: HybridSystemSpec
    method: str
    nominal: NominalPlan | None
    linearized: LinearizedPlan
    solution: HybridSteeringSolution
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def sdp(self):
        return self.solution.extras.get("sdp")

    def feedback_plan(self) -> FeedbackPlan:
        return hcs_feedback_plan(self.system, self.linearized, self.solution)

    def baseline_plan(self) -> FeedbackPlan | None:
        if self.nominal is None:
            return None
        return ilqr_feedback_plan(
            self.system, self.linearized, self.nominal, self.solution.sigma0, self.solution.sigma_t
        )


def invertible_chain(xis: list[np.ndarray]) -> bool:
    """The gate for the closed form: every saltation matrix square with condition number at most 1e8."""
    for xi in xis:
        if xi.shape[0] != xi.shape[1]:
            return False
        cond = np.linalg.cond(xi)
        if not np.isfinite(cond) or cond > INVERTIBLE_COND:
            return False
    return True


def nominal_trajectory(cfg: dict, system: HybridSystemSpec) -> tuple[NominalPlan | None, object]:
    """Nominal bundle from hybrid iLQR, or the zero-control rollout (``"method": "zero"``)."""
    nominal = cfg["nominal"]
    first = system.modes[system.initial_mode]
    x0 = np.asarray(cfg.get("x0", np.zeros(first.state_dim)), dtype=float)
    if nominal["method"] == "zero":
        return None, rollout_deterministic(system, x0, np.zeros((system.steps, system.max_input_dim)))
    if nominal["method"] != "ilqr":
        raise HcsError("config-error", f"unknown nominal method {nominal['method']!r}")
    last_dim = len(nominal.get("goal", []))
    with warnings.catch_warnings():
        # Event-sequence changes are kept in ``plan.warnings``; log them instead of printing.
        warnings.simplefilter("ignore", EventSequenceWarning)
        plan = solve_hilqr(system, x0, _ilqr_config(nominal, last_dim))
    for note in plan.warnings:
        log.info("iLQR: %s", note)
    if not plan.converged:
        log.warning("iLQR stopped after %d iterations without meeting its tolerance", plan.iterations)
    return plan, plan.bundle


def run_steer(cfg: dict, method: str = "auto") -> SteerOutcome:
    """Nominal, linearization and steering solve for one configuration."""
    if method not in METHODS:
        raise HcsError("config-error", f"method must be one of {METHODS}")
    t0 = time.perf_counter()
    system = build_system(cfg)
    nominal, bundle = nominal_trajectory(cfg, system)
    t1 = time.perf_counter()
    lin = linearize_along(bundle, system)
    t2 = time.perf_counter()
    outcome = steer_linearized(cfg, system, nominal, lin, method)
    outcome.timings = {"nominal": t1 - t0, "linearize": t2 - t1} | outcome.timings
    return outcome


def steer_linearized(
    cfg: dict, system: HybridSystemSpec, nominal: NominalPlan | None, lin: LinearizedPlan, method: str = "auto"
) -> SteerOutcome:
    """Steering solve on an existing linearization, so several methods can share one nominal."""
    if method not in METHODS:
        raise HcsError("config-error", f"method must be one of {METHODS}")
    sigma0 = as_matrix(cfg["sigma0"], "sigma0")
    sigma_t = as_matrix(cfg["sigma_t"], "sigma_t")
    eps = float(cfg["epsilon"])
    if eps <= 0:
        raise HcsError("config-error", "epsilon must be positive")
    chosen = method
    if method == "auto":
        chosen = "analytic" if invertible_chain(lin.xis) else "sdp"
    t0 = time.perf_counter()
    if not lin.xis and chosen == "analytic":
        smooth = steer_smooth(lin.segments[0], sigma0, sigma_t, eps)
        solution = HybridSteeringSolution([smooth], [], eps, sigma0, sigma_t)
    elif chosen == "analytic":
        solution = steer_hybrid_analytic(lin.segments, lin.xis, sigma0, sigma_t, eps)
    else:
        sdp_cfg = cfg.get("sdp", {})
        problem = SdpProblem.from_segments(
            lin.segments, lin.xis, sigma0, sigma_t, eps,
            eta_schedule=tuple(float(e) for e in sdp_cfg.get("eta_schedule", DEFAULT_ETAS)),
            tol=float(sdp_cfg.get("tol", 1e-9)), max_iter=int(sdp_cfg.get("max_iter", 200)),
        )
        solution = recover_controllers(solve_sdp(problem), problem)
    timings = {"steer": time.perf_counter() - t0}
    return SteerOutcome(cfg, system, chosen, nominal, lin, solution, timings)


def numerical_rank(a: np.ndarray, tol: float = RANK_TOL) -> int:
    w = np.linalg.eigvalsh(0.5 * (a + a.T))
    return int(np.sum(w > tol * max(w.max(), 0.0)))


def eigen_ratio(a: np.ndarray) -> float:
    """``lambda_min / lambda_max`` of a symmetric PSD matrix (clipped at zero)."""
    w = np.linalg.eigvalsh(0.5 * (a + a.T))
    return float(max(w.min(), 0.0) / w.max()) if w.max() > 0 else float("nan")


def summarize(outcome: SteerOutcome) -> dict:
    sol = outcome.solution
    jumps = []
    for i, jump in enumerate(sol.jumps):
        entry = {
            "index": i,
            "time": jump.t,
            "xi": jump.xi,
            "sigma_minus": jump.sigma_minus,
            "sigma_plus": jump.sigma_plus,
            "sigma_plus_rank": numerical_rank(jump.sigma_plus),
            "sigma_plus_eigen_ratio": eigen_ratio(jump.sigma_plus),
            "sigma_jump_residual": jump.sigma_residual(),
        }
        if outcome.method == "analytic":
            entry["pi_jump_residual"] = jump.pi_residual()
        jumps.append(entry)
    out = {
        "experiment": outcome.config.get("experiment"),
        "method": outcome.method,
        "segments": len(sol.segments),
        "segment_modes": outcome.linearized.segment_modes,
        "event_times": outcome.linearized.event_times,
        "merged_transitions": sorted(outcome.linearized.merged_transitions),
        "jumps": jumps,
        "terminal_error": sol.terminal_error(),
        "initial_error": sol.initial_error(),
        "control_cost": sol.cost(),
        "timings": outcome.timings,
    }
    if outcome.sdp is not None:
        s = outcome.sdp
        out["objective"] = s.objective
        out["kkt_residual"] = s.kkt_residual
        out["iterations"] = s.iterations
        out["eta"] = s.eta
        out["eta_history"] = [
            {"eta": h["eta"], "objective": h["objective"], "kkt_residual": h["kkt_residual"],
             "iterations": h["iterations"], "sigma_minus": h["sigma_minus"]}
            for h in s.eta_history
        ]
    else:
        out["objective"] = sol.cost()
    if outcome.nominal is not None:
        out["nominal"] = {"cost": outcome.nominal.cost, "iterations": outcome.nominal.iterations,
                          "converged": outcome.nominal.converged, "warnings": outcome.nominal.warnings}
    return out


# ------------------------------------------------------------------ plan archives


def plan_to_arrays(plan: FeedbackPlan, config: dict) -> dict[str, np.ndarray]:
    """Flatten a plan and its run configuration into npz-ready arrays (no pickled objects)."""
    arrays = {
        "label": np.asarray(plan.label),
        "times": plan.times,
        "segment_modes": np.asarray(plan.segment_modes, dtype=int),
        "x_ref": plan.x_ref,
        "u_ref": plan.u_ref,
        "gains": plan.gains,
        "nominal_segment": plan.nominal_segment,
        "merged_transitions": np.asarray(sorted(plan.merged_transitions), dtype=int).reshape(-1, 2),
        "x0": plan.x0,
        "sigma0": plan.sigma0,
        "config_json": np.asarray(json.dumps(to_jsonable(config), sort_keys=True)),
    }
    if plan.planned_sigma is not None:
        arrays["planned_sigma"] = plan.planned_sigma
    if plan.sigma_t is not None:
        arrays["sigma_t"] = plan.sigma_t
    return arrays


def plan_from_arrays(arrays: dict[str, np.ndarray]) -> tuple[FeedbackPlan, dict]:
    try:
        plan = FeedbackPlan(
            label=str(arrays["label"]),
            times=arrays["times"],
            segment_modes=[int(m) for m in arrays["segment_modes"]],
            x_ref=arrays["x_ref"],
            u_ref=arrays["u_ref"],
            gains=arrays["gains"],
            planned_sigma=arrays.get("planned_sigma"),
            nominal_segment=arrays["nominal_segment"],
            merged_transitions={(int(a), int(b)) for a, b in arrays["merged_transitions"]},
            x0=arrays["x0"],
            sigma0=arrays["sigma0"],
            sigma_t=arrays.get("sigma_t"),
        )
        config = json.loads(str(arrays["config_json"]))
    except KeyError as exc:
        raise HcsError("config-error", f"plan archive is missing {exc}") from exc
    return plan, config
