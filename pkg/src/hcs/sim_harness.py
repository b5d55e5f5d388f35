"""Monte-Carlo validation of hybrid feedback plans.

Samples follow the nonlinear hybrid SDE

    dX = f_j(t, X, u) dt + sqrt(eps) B_j(t, X) dW,   u = u_ref(t) + K(t) (X - x_ref(t)),

with exact resets at guard crossings. Each step advances the drift with RK4
and adds the Euler-Maruyama noise increment, so ``eps = 0`` reproduces the
deterministic rollout. Every sample owns its random streams (spawned from the
master seed), and samples are processed in fixed-size chunks whose statistics
are merged in chunk order. Results are therefore identical for any thread
count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import HcsError
from .hybrid_analytic import HybridSteeringSolution
from .hybrid_model import Flow, HybridSystemSpec, TransitionSpec, adapt_control
from .linalg import sym
from .nominal_ilqr import LinearizedPlan, NominalPlan

log = logging.getLogger(__name__)

NOISE_BLOCK = 512  # steps of noise drawn per refill; fixed so streams never depend on chunking
BISECTION_ITERS = 60


# ------------------------------------------------------------------ plan data


@dataclass
class FeedbackPlan:
    """Reference, gain and planned covariance schedules on the system grid, one slice per steering segment.

    Arrays are zero padded (NaN for covariances) to the largest state and input
    sizes. Outside its own time window a segment's reference is continued with
    the mode's flow under the boundary control, and its gain is held at the
    boundary value, so samples whose events come early or late still get a
    well-defined control.
    """

    label: str
    times: np.ndarray
    segment_modes: list[int]
    x_ref: np.ndarray  # (J, N + 1, n_max)
    u_ref: np.ndarray  # (J, N + 1, m_max)
    gains: np.ndarray  # (J, N + 1, m_max, n_max)
    planned_sigma: np.ndarray | None  # (J, N + 1, n_max, n_max), NaN outside each segment
    nominal_segment: np.ndarray  # (N + 1,) steering segment the nominal occupies at each node
    merged_transitions: set[tuple[int, int]]
    x0: np.ndarray
    sigma0: np.ndarray
    sigma_t: np.ndarray | None = None

    @property
    def segments(self) -> int:
        return len(self.segment_modes)


def _extend_reference(flow: Flow, ts, xs, us, grid: np.ndarray):
    """Reference states on ``grid``: interpolated inside ``[ts[0], ts[-1]]``, integrated outside."""
    n = xs.shape[1]
    out = np.full((grid.size, n), np.nan)
    inside = (grid >= ts[0]) & (grid <= ts[-1])
    for i in range(n):
        out[inside, i] = np.interp(grid[inside], ts, xs[:, i])
    with np.errstate(all="ignore"):
        for direction, anchor_t, anchor_x, u in ((1, ts[-1], xs[-1], us[-1]), (-1, ts[0], xs[0], us[0])):
            idx = np.nonzero(grid > ts[-1])[0] if direction > 0 else np.nonzero(grid < ts[0])[0][::-1]
            t, x = anchor_t, anchor_x.copy()
            for k in idx:
                h = np.array([grid[k] - t])
                x = _rk4(flow, np.array([t]), x[None], u[None], h)[0]
                t = grid[k]
                out[k] = x if np.all(np.isfinite(x)) else np.nan
                if not np.all(np.isfinite(x)):
                    break
    return out


def _on_grid(ts, values, grid):
    """Linear interpolation of node values onto ``grid``, held constant outside the node range."""
    flat = values.reshape(len(ts), -1)
    out = np.empty((grid.size, flat.shape[1]))
    for i in range(flat.shape[1]):
        out[:, i] = np.interp(grid, ts, flat[:, i])
    return out.reshape((grid.size,) + values.shape[1:])


def build_feedback_plan(
    system: HybridSystemSpec,
    segment_modes: list[int],
    nodes: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray | None]],
    *,
    event_times: list[float],
    merged_transitions: set[tuple[int, int]] | None = None,
    sigma0: np.ndarray,
    sigma_t: np.ndarray | None = None,
    label: str = "plan",
) -> FeedbackPlan:
    """Assemble a plan from per-segment nodes ``(times, x_nom, u_nom, K, Sigma or None)``."""
    if len(nodes) != len(segment_modes) or len(event_times) != len(nodes) - 1:
        raise HcsError("dimension-mismatch", "need one node set per segment and one event between segments")
    grid = system.times
    n_max, m_max = system.max_state_dim, system.max_input_dim
    j_count = len(nodes)
    x_ref = np.zeros((j_count, grid.size, n_max))
    u_ref = np.zeros((j_count, grid.size, m_max))
    gains = np.zeros((j_count, grid.size, m_max, n_max))
    planned = None
    if all(nd[4] is not None for nd in nodes):
        planned = np.full((j_count, grid.size, n_max, n_max), np.nan)
    for j, (ts, xs, us, ks, sig) in enumerate(nodes):
        mode = system.modes[segment_modes[j]]
        n, m = mode.state_dim, mode.input_dim
        ts = np.asarray(ts, float)
        x_ref[j, :, :n] = _extend_reference(mode.flow, ts, np.asarray(xs, float), np.asarray(us, float), grid)
        u_ref[j, :, :m] = _on_grid(ts, np.asarray(us, float)[:, :m], grid)
        gains[j, :, :m, :n] = _on_grid(ts, np.asarray(ks, float), grid)
        if j > 0:
            # The nominal finishes its event step with the pre-event control; keep that
            # so a noise-free sample retraces the nominal exactly.
            k = int(np.searchsorted(grid, ts[0], side="right")) - 1
            if 0 <= k < grid.size - 1 and grid[k] < ts[0]:
                u_ref[j, k, :m] = adapt_control(np.asarray(nodes[j - 1][2][-1], float), m)
        if planned is not None:
            inside = (grid >= ts[0] - 1e-12) & (grid <= ts[-1] + 1e-12)
            planned[j, inside, :n, :n] = _on_grid(ts, np.asarray(sig, float), grid[inside])
    nominal_segment = np.searchsorted(np.asarray(event_times, float), grid, side="left").astype(int)
    x0 = np.asarray(nodes[0][1][0], float)
    return FeedbackPlan(
        label, grid, list(segment_modes), x_ref, u_ref, gains, planned, nominal_segment,
        set(merged_transitions or ()), x0, np.asarray(sigma0, float),
        None if sigma_t is None else np.asarray(sigma_t, float),
    )


def hcs_feedback_plan(system: HybridSystemSpec, lin: LinearizedPlan, solution: HybridSteeringSolution) -> FeedbackPlan:
    """Covariance-steering feedback ``K = -B' Pi`` around the linearized nominal."""
    nodes = [
        (seg.times, xs, us, sol.gains, sol.sigma)
        for seg, xs, us, sol in zip(lin.segments, lin.nominal_states, lin.nominal_controls, solution.segments)
    ]
    return build_feedback_plan(
        system, lin.segment_modes, nodes, event_times=lin.event_times,
        merged_transitions=lin.merged_transitions, sigma0=solution.sigma0, sigma_t=solution.sigma_t,
        label="H-CS",
    )


def ilqr_feedback_plan(
    system: HybridSystemSpec, lin: LinearizedPlan, nominal: NominalPlan, sigma0: np.ndarray,
    sigma_t: np.ndarray | None = None,
) -> FeedbackPlan:
    """Baseline that keeps the iLQR tracking gains from the last backward pass."""
    bundle = nominal.bundle
    n_steps = len(nominal.gains)
    owner = np.array([lin.segment_of_bundle_piece(int(bundle.segment[k])) for k in range(n_steps)])
    nodes = []
    for j, (seg, xs, us) in enumerate(zip(lin.segments, lin.nominal_states, lin.nominal_controls)):
        steps = np.nonzero(owner == j)[0]
        n, m = seg.n, seg.b.shape[2]
        ks = np.zeros((len(seg.times), m, n))
        for i, t in enumerate(seg.times):
            k = steps[np.argmin(np.abs(bundle.times[steps] - t))]
            g = nominal.gains[k]
            if g.shape == (m, n):
                ks[i] = g
        nodes.append((seg.times, xs, us, ks, None))
    return build_feedback_plan(
        system, lin.segment_modes, nodes, event_times=lin.event_times,
        merged_transitions=lin.merged_transitions, sigma0=sigma0, sigma_t=sigma_t, label="H-iLQR",
    )


# ------------------------------------------------------------------ config, results


@dataclass(frozen=True)
class SimConfig:
    """Ensemble settings. The time grid is the system grid (``dt``, ``horizon``)."""

    sample_count: int
    master_seed: int = 0
    epsilon: float = 0.0
    thinning: int = 1
    sample_initial: bool = True
    threads: int = 1
    chunk_size: int = 500
    max_events: int = 16

    def __post_init__(self):
        if self.sample_count < 1:
            raise HcsError("config-error", "sample_count must be at least 1")
        if self.epsilon < 0:
            raise HcsError("config-error", "epsilon must be nonnegative")
        if self.thinning < 1 or self.chunk_size < 1 or self.threads < 1:
            raise HcsError("config-error", "thinning, chunk_size and threads must be positive")


@dataclass
class EnsembleResult:
    times: np.ndarray
    segment_of_time: np.ndarray
    mean: np.ndarray
    covariance: np.ndarray
    counts: np.ndarray
    event_times: np.ndarray
    event_counts: np.ndarray
    terminal_states: np.ndarray
    terminal_covariance: np.ndarray
    escaped: np.ndarray
    coverage_inside: np.ndarray | None = None
    coverage_total: np.ndarray | None = None
    report: dict = field(default_factory=dict)

    @property
    def sample_count(self) -> int:
        return len(self.escaped)

    @property
    def escape_rate(self) -> float:
        return float(np.mean(self.escaped))

    def first_event_times(self) -> np.ndarray:
        return self.event_times[:, 0]


@dataclass(frozen=True)
class CovarianceSchedule:
    """Planned covariance on a set of times, NaN where no plan exists."""

    times: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_plan(cls, plan: FeedbackPlan, times: np.ndarray | None = None) -> "CovarianceSchedule":
        if plan.planned_sigma is None:
            raise HcsError("config-error", f"plan {plan.label!r} carries no covariance schedule")
        idx = np.arange(plan.times.size) if times is None else np.searchsorted(plan.times, times - 1e-12)
        seg = plan.nominal_segment[idx]
        return cls(plan.times[idx], plan.planned_sigma[seg, idx])


# ------------------------------------------------------------------ statistics


def empirical_covariance(samples: np.ndarray) -> np.ndarray:
    """Unbiased sample covariance around the sample mean (rows are samples)."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise HcsError("config-error", "need at least two samples of a vector quantity")
    return sym(np.atleast_2d(np.cov(samples, rowvar=False)))


def _merge_moments(count_a, mean_a, m2_a, count_b, mean_b, m2_b):
    """Pairwise combination of (count, mean, centered second moment) along the leading axes."""
    total = count_a + count_b
    safe = np.where(total > 0, total, 1)
    delta = mean_b - mean_a
    mean = mean_a + delta * (count_b / safe)[..., None]
    corr = (count_a * count_b / safe)[..., None, None] * np.einsum("...i,...j->...ij", delta, delta)
    return total, mean, m2_a + m2_b + corr


def compare_schedules(ensemble: EnsembleResult, planned: CovarianceSchedule) -> dict:
    """Deviation of the empirical covariance from a planned schedule.

    Per recorded time the relative Frobenius deviation is reported (NaN where
    the plan or the ensemble has no value), along with the terminal deviation
    and, when the ensemble tracked it, the fraction of samples inside the
    planned 3-sigma tube per axis.
    """
    if len(planned.times) != len(ensemble.times) or not np.allclose(planned.times, ensemble.times):
        raise HcsError("dimension-mismatch", "planned schedule and ensemble are on different times")
    dev = np.full(len(ensemble.times), np.nan)
    for r, (s_hat, s_plan) in enumerate(zip(ensemble.covariance, planned.sigma)):
        n = int(np.sum(~np.isnan(np.diag(s_plan))))
        if n == 0 or ensemble.counts[r] < 2:
            continue
        a, b = s_hat[:n, :n], s_plan[:n, :n]
        if np.any(np.isnan(a)):
            continue
        dev[r] = float(np.linalg.norm(a - b) / np.linalg.norm(b))
    s_t = planned.sigma[-1]
    n_t = int(np.sum(~np.isnan(np.diag(s_t))))
    terminal = np.nan
    if n_t and ensemble.terminal_covariance.shape == (n_t, n_t):
        target = s_t[:n_t, :n_t]
        terminal = float(np.linalg.norm(ensemble.terminal_covariance - target) / np.linalg.norm(target))
    report = {
        "per_time_deviation": dev,
        "max_deviation": float(np.nanmax(dev)) if np.any(np.isfinite(dev)) else float("nan"),
        "terminal_deviation": terminal,
        "escape_rate": ensemble.escape_rate,
        "samples": ensemble.sample_count,
    }
    if ensemble.coverage_total is not None and ensemble.coverage_total.sum() > 0:
        inside = ensemble.coverage_inside.sum(axis=0)
        total = ensemble.coverage_total.sum()
        per_axis = inside / total
        used = ensemble.coverage_inside.sum(axis=0) > 0
        report["coverage_per_axis"] = per_axis[used]
        report["coverage"] = float(per_axis[used].mean()) if used.any() else float("nan")
    return report


def terminal_deviation(ensemble: EnsembleResult, sigma_t: np.ndarray) -> float:
    """``||Sigma_hat_T - Sigma_T||_F / ||Sigma_T||_F``."""
    sigma_t = np.asarray(sigma_t, float)
    if ensemble.terminal_covariance.shape != sigma_t.shape:
        return float("nan")
    return float(np.linalg.norm(ensemble.terminal_covariance - sigma_t) / np.linalg.norm(sigma_t))


# ------------------------------------------------------------------ simulation


def _rk4(flow: Flow, t: np.ndarray, x: np.ndarray, u: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Batched RK4 with per-sample start times ``t`` and step lengths ``h``."""
    hh = h[:, None]
    k1 = flow.f(t, x, u)
    k2 = flow.f(t + 0.5 * h, x + 0.5 * hh * k1, u)
    k3 = flow.f(t + 0.5 * h, x + 0.5 * hh * k2, u)
    k4 = flow.f(t + h, x + hh * k3, u)
    return x + (hh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class _Streams:
    """Per-sample generators; step noise is drawn in fixed blocks so it never depends on chunking."""

    def __init__(self, seeds: list[np.random.SeedSequence], n_max: int, m_max: int, max_events: int):
        self.m_max = m_max
        step_seeds, event_seeds, init_seeds = zip(*(s.spawn(3) for s in seeds))
        self.step_rngs = [np.random.default_rng(s) for s in step_seeds]
        self.initial = np.stack([np.random.default_rng(s).standard_normal(n_max) for s in init_seeds])
        self.events = np.stack(
            [np.random.default_rng(s).standard_normal((max_events, m_max)) for s in event_seeds]
        )
        self._block_start = -1
        self._block = None

    def step(self, k: int) -> np.ndarray:
        start = (k // NOISE_BLOCK) * NOISE_BLOCK
        if start != self._block_start:
            self._block = np.stack([r.standard_normal((NOISE_BLOCK, self.m_max)) for r in self.step_rngs])
            self._block_start = start
        return self._block[:, k - start]


class _Chunk:
    """Stepping state for one chunk of samples."""

    def __init__(self, system: HybridSystemSpec, plan: FeedbackPlan, cfg: SimConfig, seeds, record_idx):
        self.system, self.plan, self.cfg = system, plan, cfg
        n_max, m_max = system.max_state_dim, system.max_input_dim
        size = len(seeds)
        self.streams = _Streams(seeds, n_max, m_max, cfg.max_events)
        first_mode = system.modes[plan.segment_modes[0]]
        n0 = first_mode.state_dim
        self.x = np.zeros((size, n_max))
        self.x[:, :n0] = plan.x0
        if cfg.sample_initial:
            chol = np.linalg.cholesky(plan.sigma0 + 1e-300 * np.eye(n0))
            self.x[:, :n0] += self.streams.initial[:, :n0] @ chol.T
        self.mode = np.full(size, first_mode.mode_id)
        self.seg = np.zeros(size, dtype=int)
        self.n_events = np.zeros(size, dtype=int)
        self.event_times = np.full((size, cfg.max_events), np.nan)
        self.escaped = np.zeros(size, dtype=bool)
        self.record_idx = record_idx
        j_count = plan.segments
        r_count = len(record_idx)
        self.count = np.zeros((r_count, j_count))
        self.mean = np.zeros((r_count, j_count, n_max))
        self.m2 = np.zeros((r_count, j_count, n_max, n_max))
        self.cov_in = np.zeros((r_count, n_max)) if plan.planned_sigma is not None else None
        self.cov_tot = np.zeros(r_count) if plan.planned_sigma is not None else None
        self.outgoing = {mid: system.transitions_from(mid) for mid in system.modes}

    # -- helpers
    def _control(self, idx, k, theta=None):
        """Sample-and-hold feedback: reference control and gain of node ``k``, reference state at ``t_k + theta dt``.

        Mid-step (after an event) the reference state is integrated back from
        node ``k + 1`` under the held reference control, which lands on the
        nominal post-event state; linear interpolation would miss it by
        ``O(dt^2)`` and perturb noise-free samples.
        """
        seg = self.seg[idx]
        mode = self.system.modes[int(self.mode[idx[0]])]
        n, m = mode.state_dim, mode.input_dim
        plan = self.plan
        xr = plan.x_ref[seg, k, :n]
        if theta is not None:
            k1 = min(k + 1, plan.times.size - 1)
            x1 = plan.x_ref[seg, k1, :n]
            back = (theta - 1.0) * (plan.times[k1] - plan.times[k])
            with np.errstate(all="ignore"):
                xr_flow = _rk4(mode.flow, np.full(idx.size, plan.times[k1]), x1, plan.u_ref[seg, k, :m], back)
            xr_lin = xr + theta[:, None] * (x1 - xr)
            xr = np.where(np.isfinite(xr_flow), xr_flow, xr_lin)
        dx = self.x[idx, :n] - xr
        return plan.u_ref[seg, k, :m] + np.einsum("bij,bj->bi", plan.gains[seg, k, :m, :n], dx)

    def _check_segment(self, idx):
        """Clamp segment indices and flag samples whose mode no longer matches any plan slice."""
        j_max = self.plan.segments - 1
        over = self.seg[idx] > j_max
        self.seg[idx[over]] = j_max
        for i in idx:
            if self.system.modes[int(self.mode[i])].state_dim != self.system.modes[self.plan.segment_modes[self.seg[i]]].state_dim:
                self.escaped[i] = True

    def _advance(self, idx, k, t0, h, noise):
        """Advance samples ``idx`` (all in one mode) from ``t0`` by ``h`` with unit normals ``noise``.

        Handles guard crossings recursively. ``t0`` and ``h`` are per-sample arrays.
        """
        if idx.size == 0:
            return
        mode = self.system.modes[int(self.mode[idx[0]])]
        n, m = mode.state_dim, mode.input_dim
        flow = mode.flow
        step_frac = None if np.all(t0 == self.plan.times[k]) else (t0 - self.plan.times[k]) / self.system.dt
        u = self._control(idx, k, step_frac)
        x = self.x[idx, :n]
        with np.errstate(all="ignore"):
            diffusion = np.sqrt(self.cfg.epsilon * h)[:, None] * np.einsum(
                "bij,bj->bi", flow.noise_gain(t0, x), noise[:, :m]
            )
            x_new = _rk4(flow, t0, x, u, h) + diffusion
        bad = ~np.all(np.isfinite(x_new), axis=1)
        theta = np.full(idx.size, np.inf)
        which = np.full(idx.size, -1)
        outgoing = self.outgoing[mode.mode_id]
        for ti, tr in enumerate(outgoing):
            g0 = np.asarray(tr.guard.value(t0, x), float)
            g1 = np.asarray(tr.guard.value(t0 + h, x_new), float)
            hit = _crossing_mask(tr, g0, g1) & ~bad
            if not hit.any():
                continue
            th = self._locate(flow, tr, t0[hit], x[hit], u[hit], h[hit], diffusion[hit], g0[hit])
            better = th < theta[hit]
            sel = np.nonzero(hit)[0][better]
            theta[sel] = th[better]
            which[sel] = ti
        self.escaped[idx[bad]] = True
        plain = (which < 0) & ~bad
        self.x[idx[plain], :n] = x_new[plain]
        crossed = np.nonzero(which >= 0)[0]
        if crossed.size == 0:
            return
        # Partial step to the crossing, exact reset, then finish the step in the new mode.
        th = theta[crossed]
        sub = idx[crossed]
        hx = th * h[crossed]
        t_ev = t0[crossed] + hx
        x_minus = _rk4(flow, t0[crossed], x[crossed], u[crossed], hx) + np.sqrt(th)[:, None] * diffusion[crossed]
        for ti in np.unique(which[crossed]):
            tr: TransitionSpec = outgoing[ti]
            sel = which[crossed] == ti
            ids = sub[sel]
            full = self.n_events[ids] >= self.cfg.max_events
            self.escaped[ids[full]] = True
            ids, xm, te = ids[~full], x_minus[sel][~full], t_ev[sel][~full]
            if ids.size == 0:
                continue
            x_plus = np.asarray(tr.reset.apply(te, xm), float).reshape(ids.size, -1)
            self.x[ids] = 0.0
            self.x[ids, : x_plus.shape[1]] = x_plus
            self.event_times[ids, self.n_events[ids]] = te
            ev_noise = self.streams.events[ids, self.n_events[ids]]
            self.n_events[ids] += 1
            self.mode[ids] = tr.to_mode
            if (tr.from_mode, tr.to_mode) not in self.plan.merged_transitions:
                self.seg[ids] += 1
            self._check_segment(ids)
            live = ids[~self.escaped[ids]]
            keep = ~self.escaped[ids]
            rest = (self.plan.times[k] + self.system.dt) - te[keep]
            self._advance(live, k, te[keep], np.maximum(rest, 0.0), ev_noise[keep])

    def _locate(self, flow, tr, t0, x, u, h, diffusion, g0):
        """Bisection on ``theta`` along ``RK4(x, u, theta h) + sqrt(theta) * noise``.

        The square root gives the pre-event part of the step its proper share of
        the diffusion variance; the rest of the step draws fresh noise.
        """
        lo = np.zeros(t0.size)
        hi = np.ones(t0.size)
        s0 = np.sign(g0)
        for _ in range(BISECTION_ITERS):
            mid = 0.5 * (lo + hi)
            p = _rk4(flow, t0, x, u, mid * h) + np.sqrt(mid)[:, None] * diffusion
            g = np.asarray(tr.guard.value(t0 + mid * h, p), float)
            same = (np.sign(g) == s0) & (g != 0.0)
            lo = np.where(same, mid, lo)
            hi = np.where(same, hi, mid)
        return hi

    def _record(self, r, k):
        plan = self.plan
        live = ~self.escaped
        for j in range(plan.segments):
            sel = live & (self.seg == j)
            n = self.system.modes[plan.segment_modes[j]].state_dim
            cnt = int(sel.sum())
            if cnt == 0:
                continue
            xs = self.x[sel, :n]
            mu = xs.mean(axis=0)
            d = xs - mu
            self.count[r, j] = cnt
            self.mean[r, j, :n] = mu
            self.m2[r, j, :n, :n] = d.T @ d
        if self.cov_in is not None:
            j_nom = plan.nominal_segment[k]
            n = self.system.modes[plan.segment_modes[j_nom]].state_dim
            sig = plan.planned_sigma[j_nom, k, :n, :n]
            sel = live & (self.seg == j_nom)
            if sel.any() and np.all(np.isfinite(sig)):
                half = 3.0 * np.sqrt(np.maximum(np.diag(sig), 0.0))
                dev = np.abs(self.x[sel, :n] - plan.x_ref[j_nom, k, :n])
                self.cov_in[r, :n] += np.sum(dev <= half, axis=0)
                self.cov_tot[r] += int(sel.sum())

    def run(self):
        n_steps = self.plan.times.size - 1
        rec = {int(k): r for r, k in enumerate(self.record_idx)}
        dt = self.system.dt
        for k in range(n_steps + 1):
            if k in rec:
                self._record(rec[k], k)
            if k == n_steps:
                break
            noise = self.streams.step(k)
            live = np.nonzero(~self.escaped)[0]
            for mid in np.unique(self.mode[live]):
                idx = live[self.mode[live] == mid]
                self._advance(idx, k, np.full(idx.size, self.plan.times[k]), np.full(idx.size, dt), noise[idx])
        return self


def _crossing_mask(tr: TransitionSpec, g0: np.ndarray, g1: np.ndarray) -> np.ndarray:
    if tr.direction < 0:
        return (g0 > 0.0) & (g1 <= 0.0)
    if tr.direction > 0:
        return (g0 < 0.0) & (g1 >= 0.0)
    return (g0 != 0.0) & (g0 * g1 <= 0.0)


def simulate_ensemble(system: HybridSystemSpec, plan: FeedbackPlan, config: SimConfig) -> EnsembleResult:
    """Run ``config.sample_count`` closed-loop samples and summarize them.

    Samples that leave the modeled domain (non-finite states, an event sequence
    the plan has no slice for, or too many events) are frozen and counted in
    ``escaped`` rather than raising.
    """
    if plan.times.size != system.times.size or not np.allclose(plan.times, system.times):
        raise HcsError("dimension-mismatch", "plan and system grids differ")
    n_steps = plan.times.size - 1
    record_idx = np.unique(np.append(np.arange(0, n_steps + 1, config.thinning), n_steps))
    seeds = np.random.SeedSequence(config.master_seed).spawn(config.sample_count)
    bounds = list(range(0, config.sample_count, config.chunk_size))

    def work(start):
        stop = min(start + config.chunk_size, config.sample_count)
        return _Chunk(system, plan, config, seeds[start:stop], record_idx).run()

    if config.threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            chunks = list(pool.map(work, bounds))
    else:
        chunks = [work(b) for b in bounds]

    count, mean, m2 = chunks[0].count, chunks[0].mean, chunks[0].m2
    for c in chunks[1:]:
        count, mean, m2 = _merge_moments(count, mean, m2, c.count, c.mean, c.m2)
    r_idx = np.arange(len(record_idx))
    j_nom = plan.nominal_segment[record_idx]
    n_max = system.max_state_dim
    cnt = count[r_idx, j_nom]
    cov = np.full((len(record_idx), n_max, n_max), np.nan)
    for r, j in enumerate(j_nom):
        n = system.modes[plan.segment_modes[j]].state_dim
        if cnt[r] >= 2:
            cov[r, :n, :n] = sym(m2[r, j, :n, :n] / (cnt[r] - 1))
    mean_nom = mean[r_idx, j_nom]

    escaped = np.concatenate([c.escaped for c in chunks])
    seg = np.concatenate([c.seg for c in chunks])
    states = np.concatenate([c.x for c in chunks])
    j_last = plan.segments - 1
    n_last = system.modes[plan.segment_modes[j_last]].state_dim
    final = (~escaped) & (seg == j_last)
    terminal_states = states[final, :n_last]
    terminal_cov = (
        empirical_covariance(terminal_states) if terminal_states.shape[0] >= 2 else np.full((n_last, n_last), np.nan)
    )
    result = EnsembleResult(
        times=plan.times[record_idx],
        segment_of_time=j_nom,
        mean=mean_nom,
        covariance=cov,
        counts=cnt,
        event_times=np.concatenate([c.event_times for c in chunks]),
        event_counts=np.concatenate([c.n_events for c in chunks]),
        terminal_states=terminal_states,
        terminal_covariance=terminal_cov,
        escaped=escaped,
        coverage_inside=None if chunks[0].cov_in is None else sum(c.cov_in for c in chunks),
        coverage_total=None if chunks[0].cov_tot is None else sum(c.cov_tot for c in chunks),
    )
    if plan.planned_sigma is not None:
        result.report = compare_schedules(result, CovarianceSchedule.from_plan(plan, result.times))
    elif plan.sigma_t is not None:
        result.report = {"terminal_deviation": terminal_deviation(result, plan.sigma_t),
                         "escape_rate": result.escape_rate, "samples": result.sample_count}
    if result.escape_rate > 0:
        log.warning("%s: %.2f%% of samples escaped the modeled domain", plan.label, 100 * result.escape_rate)
    return result
