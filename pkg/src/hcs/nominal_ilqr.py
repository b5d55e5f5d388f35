"""Event-aware iterative LQR that produces the nominal mean trajectory.

Every RK4 step is linearized exactly by the chain rule through its stages.
A step that contains an event is linearized as

    d x_{k+1} = A_post Xi A_pre d x_k + (A_post Xi B_pre + B_post P) d u_k

where ``A_pre``/``A_post`` are the partial-step Jacobians before and after the
event, ``Xi`` its saltation matrix, and ``P`` the truncate/zero-pad map that
carries the control into the new mode. The value function therefore crosses
events as ``Xi' V Xi``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import HcsError
from .hybrid_model import (
    Flow,
    HybridSystemSpec,
    TrajectoryBundle,
    adapt_control,
    rollout_deterministic,
    saltation_matrix,
)
from .smooth_steering import LinearSegment

log = logging.getLogger(__name__)


class EventSequenceWarning(UserWarning):
    """The optimized trajectory's mode sequence differs from the previous iterate's."""


@dataclass(frozen=True)
class IlqrConfig:
    goal: np.ndarray
    terminal_weight: np.ndarray
    control_weight: float = 1.0
    max_iterations: int = 100
    tolerance: float = 1e-6
    line_search: tuple[float, ...] = tuple(0.5**i for i in range(10))
    initial_regularization: float = 1e-6
    # Running state cost from each mode's ``state_cost``; off by default (terminal cost only).
    use_state_cost: bool = False

    def __post_init__(self):
        if self.control_weight <= 0:
            raise HcsError("config-error", "control weight must be positive")
        q = np.asarray(self.terminal_weight, dtype=float)
        if np.linalg.eigvalsh(0.5 * (q + q.T)).min() < -1e-12:
            raise HcsError("config-error", "terminal weight must be positive semidefinite")


@dataclass
class NominalPlan:
    bundle: TrajectoryBundle
    feedforward: list[np.ndarray]
    gains: list[np.ndarray]
    cost_history: list[float]
    iterations: int
    converged: bool
    warnings: list[str] = field(default_factory=list)

    @property
    def cost(self) -> float:
        return self.cost_history[-1]


# -------------------------------------------------------------- Jacobians


def rk4_jacobians(flow: Flow, t, x, u, h):
    """Jacobians of one RK4 step with respect to state and control.

    All arguments may carry a leading batch axis (``t`` and ``h`` of shape ``(K,)``).
    Returns ``(A, B)`` of shapes ``(..., n, n)`` and ``(..., n, m)``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    h = np.asarray(h, dtype=float)
    t = np.asarray(t, dtype=float)
    hh = h[..., None, None]
    n = x.shape[-1]
    eye = np.eye(n)

    def stage(ts, xs):
        return flow.f(ts, xs, u), flow.jac_x(ts, xs, u), flow.jac_u(ts, xs, u)

    k1, j1, b1 = stage(t, x)
    x2 = x + 0.5 * h[..., None] * k1
    k2, j2, b2 = stage(t + 0.5 * h, x2)
    x3 = x + 0.5 * h[..., None] * k2
    k3, j3, b3 = stage(t + 0.5 * h, x3)
    x4 = x + h[..., None] * k3
    _, j4, b4 = stage(t + h, x4)

    d1x, d1u = j1, b1
    d2x = j2 @ (eye + 0.5 * hh * d1x)
    d2u = j2 @ (0.5 * hh * d1u) + b2
    d3x = j3 @ (eye + 0.5 * hh * d2x)
    d3u = j3 @ (0.5 * hh * d2u) + b3
    d4x = j4 @ (eye + hh * d3x)
    d4u = j4 @ (hh * d3u) + b4
    a = eye + (hh / 6.0) * (d1x + 2.0 * d2x + 2.0 * d3x + d4x)
    b = (hh / 6.0) * (d1u + 2.0 * d2u + 2.0 * d3u + d4u)
    return a, b


def _pad_map(m_from: int, m_to: int) -> np.ndarray:
    p = np.zeros((m_to, m_from))
    k = min(m_from, m_to)
    p[:k, :k] = np.eye(k)
    return p


def step_jacobians(system: HybridSystemSpec, bundle: TrajectoryBundle) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-step ``(f_x, f_u)`` along a rollout, batched per segment for smooth steps."""
    n_steps = len(bundle.times) - 1
    dt = system.dt
    fx: list[np.ndarray | None] = [None] * n_steps
    fu: list[np.ndarray | None] = [None] * n_steps
    event_steps: dict[int, list] = {}
    for ev in bundle.events:
        event_steps.setdefault(ev.step, []).append(ev)

    # Smooth steps grouped by mode for one batched call each.
    by_mode: dict[int, list[int]] = {}
    for k in range(n_steps):
        if k not in event_steps:
            by_mode.setdefault(int(bundle.modes[k]), []).append(k)
    for mode_id, ks in by_mode.items():
        mode = system.modes[mode_id]
        ks_arr = np.asarray(ks)
        xs = bundle.states[ks_arr, : mode.state_dim]
        us = bundle.controls[ks_arr, : mode.input_dim]
        a, b = rk4_jacobians(mode.flow, bundle.times[ks_arr], xs, us, np.full(len(ks), dt))
        for i, k in enumerate(ks):
            fx[k], fu[k] = a[i], b[i]

    for k, evs in event_steps.items():
        mode = system.modes[int(bundle.modes[k])]
        t, x = bundle.times[k], bundle.states[k, : mode.state_dim]
        u = bundle.controls[k, : mode.input_dim]
        m0 = mode.input_dim
        total_x = np.eye(mode.state_dim)
        total_u = np.zeros((mode.state_dim, m0))
        u_map = np.eye(m0)  # maps the step's control to the control used in the current sub-interval
        for ev in evs:
            a, b = rk4_jacobians(mode.flow, np.array([t]), x[None], u[None], np.array([ev.t_minus - t]))
            total_x = a[0] @ total_x
            total_u = a[0] @ total_u + b[0] @ u_map
            total_x = ev.xi @ total_x
            total_u = ev.xi @ total_u
            post = system.modes[ev.to_mode]
            u_map = _pad_map(mode.input_dim, post.input_dim) @ u_map
            mode, t, x, u = post, ev.t_minus, ev.x_plus, ev.u_plus
        h_rest = bundle.times[k + 1] - t
        a, b = rk4_jacobians(mode.flow, np.array([t]), x[None], u[None], np.array([h_rest]))
        fx[k] = a[0] @ total_x
        fu[k] = a[0] @ total_u + b[0] @ u_map
    return fx, fu


# ------------------------------------------------------------------ solver


def _state_cost_terms(bundle: TrajectoryBundle, system: HybridSystemSpec, k: int):
    """``(Q_k, x_k)`` for the running state cost at node ``k``, or ``None`` when the mode has no cost."""
    mode = system.modes[int(bundle.modes[k])]
    if mode.state_cost is None:
        return None
    x = bundle.states[k, : mode.state_dim]
    return mode.q_at(float(bundle.times[k])), x


def _cost(bundle: TrajectoryBundle, system: HybridSystemSpec, cfg: IlqrConfig) -> float:
    running = 0.5 * cfg.control_weight * system.dt * float(np.sum(bundle.controls**2))
    if cfg.use_state_cost:
        for k in range(len(bundle.controls)):
            terms = _state_cost_terms(bundle, system, k)
            if terms is not None:
                q, x = terms
                running += 0.5 * system.dt * float(x @ q @ x)
    xf = bundle.final_state
    goal = np.asarray(cfg.goal, dtype=float)
    if xf.shape != goal.shape:
        raise HcsError("dimension-mismatch", f"final state has {xf.size} entries, goal has {goal.size}")
    e = xf - goal
    return running + 0.5 * float(e @ np.asarray(cfg.terminal_weight, float) @ e)


def _backward(system, bundle, cfg, fx, fu, mu):
    n_steps = len(fx)
    q_t = np.asarray(cfg.terminal_weight, float)
    e = bundle.final_state - np.asarray(cfg.goal, float)
    v_x = q_t @ e
    v_xx = q_t.copy()
    ks: list[np.ndarray] = [None] * n_steps  # type: ignore[list-item]
    kk: list[np.ndarray] = [None] * n_steps  # type: ignore[list-item]
    d1 = d2 = 0.0
    r = cfg.control_weight * system.dt
    for k in range(n_steps - 1, -1, -1):
        a, b = fx[k], fu[k]
        m = b.shape[1]
        bt = b.T
        vb = v_xx @ b
        q_u = r * bundle.controls[k, :m] + bt @ v_x
        terms = _state_cost_terms(bundle, system, k) if cfg.use_state_cost else None
        q_uu = bt @ vb
        q_uu[np.diag_indices(m)] += r
        q_ux = vb.T @ a
        try:
            c_inv = np.linalg.inv(np.linalg.cholesky(q_uu + mu * np.eye(m)))
        except np.linalg.LinAlgError:
            return None
        q_uu_inv = c_inv.T @ c_inv
        k_ff = -q_uu_inv @ q_u
        k_fb = -q_uu_inv @ q_ux
        ks[k], kk[k] = k_ff, k_fb
        d1 += float(k_ff @ q_u)
        d2 += 0.5 * float(k_ff @ q_uu @ k_ff)
        kq = k_fb.T @ q_uu
        v_x = a.T @ v_x + kq @ k_ff + k_fb.T @ q_u + q_ux.T @ k_ff
        cross = k_fb.T @ q_ux
        v_xx = a.T @ v_xx @ a + kq @ k_fb + cross + cross.T
        if terms is not None:
            q, x = terms
            v_x = v_x + system.dt * (q @ x)
            v_xx = v_xx + system.dt * q
        v_xx = 0.5 * (v_xx + v_xx.T)
    return ks, kk, d1, d2


def _make_policy(system, bundle, ks, kk, alpha):
    def policy(k, t, x, seg, mode_id):
        nominal_mode = int(bundle.modes[k])
        m_nom = len(ks[k])
        u = bundle.controls[k, :m_nom] + alpha * ks[k]
        if seg == int(bundle.segment[k]) and mode_id == nominal_mode:
            u = u + kk[k] @ (x - bundle.states[k, : x.size])
        m_here = system.modes[mode_id].input_dim
        return u if m_here == m_nom else adapt_control(u, m_here)

    return policy


def solve_hilqr(
    system: HybridSystemSpec,
    x0: np.ndarray,
    config: IlqrConfig,
    horizon: float | None = None,
    *,
    initial_controls: np.ndarray | None = None,
) -> NominalPlan:
    """Hybrid iLQR with saltation-matrix value propagation across events."""
    n_steps = system.steps if horizon is None else int(round(horizon / system.dt))
    controls = np.zeros((n_steps, system.max_input_dim)) if initial_controls is None else initial_controls
    bundle = rollout_deterministic(system, x0, controls, horizon)
    cost = _cost(bundle, system, config)
    history = [cost]
    notes: list[str] = []
    mu = config.initial_regularization
    converged = False
    ks = kk = None
    it = 0
    for it in range(1, config.max_iterations + 1):
        fx, fu = step_jacobians(system, bundle)
        back = _backward(system, bundle, config, fx, fu, mu)
        while back is None:
            mu *= 10.0
            if mu > 1e10:
                raise HcsError("diverged", "control Hessian stayed indefinite")
            back = _backward(system, bundle, config, fx, fu, mu)
        ks, kk, d1, d2 = back
        accepted = False
        for alpha in config.line_search:
            try:
                cand = rollout_deterministic(system, x0, _make_policy(system, bundle, ks, kk, alpha), horizon)
                new_cost = _cost(cand, system, config)
            except HcsError as exc:
                if exc.kind in ("tangential-crossing", "grazing", "zeno-guard", "dimension-mismatch"):
                    continue
                raise
            expected = -(alpha * d1 + alpha**2 * d2)
            if new_cost < cost and (expected <= 0 or cost - new_cost >= 1e-4 * expected):
                accepted = True
                break
        if not accepted:
            # Event timing makes the cost only piecewise smooth, so a full failed
            # backtrack right after a negligible improvement counts as convergence.
            small_step = len(history) > 1 and (history[-2] - history[-1]) <= 1e2 * config.tolerance * abs(cost)
            if abs(d1) <= config.tolerance * max(1.0, abs(cost)) or small_step:
                converged = True
                break
            mu *= 10.0
            if mu > 1e10:
                if len(history) > 1:
                    log.info("iLQR stalled at cost %.10g", cost)
                    break
                raise HcsError("diverged", "no cost decrease even with full backtracking")
            continue
        if cand.mode_sequence != bundle.mode_sequence:
            msg = f"event-sequence-changed: {bundle.mode_sequence} -> {cand.mode_sequence} at iteration {it}"
            warnings.warn(msg, EventSequenceWarning, stacklevel=2)
            notes.append(msg)
        rel = (cost - new_cost) / max(abs(cost), 1e-300)
        bundle, cost = cand, new_cost
        history.append(cost)
        mu = max(mu / 10.0, 1e-12)
        log.debug("iLQR iteration %d cost %.10g alpha %.3g", it, cost, alpha)
        if rel <= config.tolerance:
            converged = True
            break
    # Final backward pass so the returned gains belong to the returned trajectory.
    fx, fu = step_jacobians(system, bundle)
    back = _backward(system, bundle, config, fx, fu, max(mu, 1e-12))
    if back is not None:
        ks, kk = back[0], back[1]
    return NominalPlan(bundle, list(ks), list(kk), history, it, converged, notes)


# ----------------------------------------------------------- linearization


@dataclass
class LinearizedPlan:
    """Linear time-varying data along a nominal: one segment per smooth piece and the saltation chain.

    ``segment_of_event[i]`` gives the steering segment that follows nominal event ``i``;
    events whose saltation matrix is the identity are absorbed into one segment.
    """

    segments: list[LinearSegment]
    xis: list[np.ndarray]
    segment_modes: list[int]
    event_times: list[float]
    nominal_states: list[np.ndarray]
    nominal_controls: list[np.ndarray]
    merged_transitions: set[tuple[int, int]] = field(default_factory=set)
    segment_of_event: list[int] = field(default_factory=list)

    def segment_of_bundle_piece(self, piece: int) -> int:
        """Steering segment holding the nominal piece that follows ``piece`` events."""
        return 0 if piece == 0 else self.segment_of_event[piece - 1]


def post_event_control(bundle: TrajectoryBundle, index: int, dt: float) -> np.ndarray:
    """Right-hand limit of the nominal control at event ``index``.

    The rollout holds the event step's control for the rest of that step, and
    the following step partly compensates for it, so neither is the post-event
    control the optimizer is converging to. The limit is extrapolated linearly
    from the next two steps. Falls back to the held control when those steps are
    missing or belong to a later piece.
    """
    ev = bundle.events[index]
    k = ev.step
    n_steps = len(bundle.controls)
    piece = index + 1
    ks = (k + 2, k + 3)
    if ks[1] >= n_steps or any(int(bundle.segment[j]) != piece for j in ks):
        return ev.u_plus
    m = ev.u_plus.size
    u2, u3 = bundle.controls[ks[0], :m], bundle.controls[ks[1], :m]
    mid = bundle.times[ks[0]] + 0.5 * dt
    return u2 + (ev.t_minus - mid) / dt * (u3 - u2)


def _segment_nodes(bundle: TrajectoryBundle, system: HybridSystemSpec, u_plus: list[np.ndarray]):
    """Nodes ``(t, x, u, mode)`` of every smooth piece between events, endpoints included."""
    times, events = bundle.times, bundle.events
    n_steps = len(times) - 1
    dt = system.dt
    pieces = []
    bounds = [(0.0, None)] + [(ev.t_minus, ev) for ev in events]
    for s, (t_start, ev_in) in enumerate(bounds):
        ev_out = events[s] if s < len(events) else None
        t_end = ev_out.t_minus if ev_out is not None else times[-1]
        mode = system.modes[int(bundle.modes[0]) if ev_in is None else ev_in.to_mode]
        n, m = mode.state_dim, mode.input_dim
        ts, xs, us = [], [], []
        if ev_in is None:
            ts.append(times[0]); xs.append(bundle.states[0, :n]); us.append(bundle.controls[0, :m])
        else:
            ts.append(ev_in.t_minus); xs.append(ev_in.x_plus); us.append(u_plus[s - 1])
        for k in range(n_steps + 1):
            if int(bundle.segment[k]) != s:
                continue
            tk = times[k]
            if tk - ts[-1] <= 1e-6 * dt or t_end - tk <= 1e-6 * dt:
                continue
            ts.append(tk)
            xs.append(bundle.states[k, :n])
            us.append(bundle.controls[min(k, n_steps - 1), :m])
        if ev_out is not None:
            ts.append(ev_out.t_minus); xs.append(ev_out.x_minus); us.append(ev_out.u_minus)
        else:
            ts.append(times[-1]); xs.append(bundle.states[-1, :n]); us.append(bundle.controls[-1, :m])
        pieces.append((np.asarray(ts), np.asarray(xs), np.asarray(us), mode))
    return pieces


def linearize_along(
    bundle: TrajectoryBundle, system: HybridSystemSpec, *, merge_identity: bool = True, identity_tol: float = 1e-12
) -> LinearizedPlan:
    """Analytic flow Jacobians along the nominal, one :class:`LinearSegment` per smooth piece.

    Saltation matrices are re-evaluated with the post-event control limit from
    :func:`post_event_control`. Events whose nominal saltation matrix is the
    identity are structural no-ops (for example an apex switch) and keep
    ``Xi = I``.
    """
    u_plus, xis = [], []
    for i, ev in enumerate(bundle.events):
        same_shape = ev.xi.shape[0] == ev.xi.shape[1]
        if same_shape and np.abs(ev.xi - np.eye(ev.xi.shape[0])).max() <= identity_tol:
            u_plus.append(ev.u_plus)
            xis.append(ev.xi)
            continue
        up = post_event_control(bundle, i, system.dt)
        tr = next(t for t in system.transitions if (t.from_mode, t.to_mode) == (ev.from_mode, ev.to_mode))
        pre, post = system.modes[ev.from_mode], system.modes[ev.to_mode]
        u_plus.append(up)
        xis.append(saltation_matrix(pre.flow, post.flow, tr, ev.t_minus, ev.x_minus, ev.u_minus, up))
    pieces = _segment_nodes(bundle, system, u_plus)
    segs, modes, xs_all, us_all = [], [], [], []
    for ts, xs, us, mode in pieces:
        a = mode.flow.jac_x(ts, xs, us)
        b = mode.flow.jac_u(ts, xs, us)
        q = np.stack([mode.q_at(t) for t in ts])
        segs.append(LinearSegment(ts, np.ascontiguousarray(a), np.ascontiguousarray(b), q))
        modes.append(mode.mode_id)
        xs_all.append(xs)
        us_all.append(us)
    merged: set[tuple[int, int]] = set()
    if merge_identity:
        out_s, out_m, out_x, out_u, out_xi, out_t = [segs[0]], [modes[0]], [xs_all[0]], [us_all[0]], [], []
        seg_of_event = []
        for i, ev in enumerate(bundle.events):
            nxt = segs[i + 1]
            same_shape = xis[i].shape[0] == xis[i].shape[1]
            if same_shape and np.abs(xis[i] - np.eye(xis[i].shape[0])).max() <= identity_tol:
                merged.add((ev.from_mode, ev.to_mode))
                prev = out_s[-1]
                out_s[-1] = LinearSegment(
                    np.concatenate([prev.times, nxt.times[1:]]),
                    np.concatenate([prev.a, nxt.a[1:]]),
                    np.concatenate([prev.b, nxt.b[1:]]),
                    np.concatenate([prev.q, nxt.q[1:]]),
                )
                out_x[-1] = np.concatenate([out_x[-1], xs_all[i + 1][1:]])
                out_u[-1] = np.concatenate([out_u[-1], us_all[i + 1][1:]])
            else:
                out_s.append(nxt); out_m.append(modes[i + 1]); out_x.append(xs_all[i + 1])
                out_u.append(us_all[i + 1]); out_xi.append(xis[i]); out_t.append(ev.t_minus)
            seg_of_event.append(len(out_s) - 1)
        return LinearizedPlan(out_s, out_xi, out_m, out_t, out_x, out_u, merged, seg_of_event)
    return LinearizedPlan(
        segs, xis, modes, [ev.t_minus for ev in bundle.events], xs_all, us_all, merged,
        list(range(1, len(bundle.events) + 1)),
    )
