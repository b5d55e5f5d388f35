"""Hybrid systems: modes, guards, resets, event detection and saltation matrices.

Flows, guards and resets accept batched states (leading axes are sample
axes) so the Monte-Carlo harness can evaluate whole ensembles at once.
Guards are positive inside their mode; a transition fires when the guard
crosses zero in the configured direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import HcsError

GRAZING_TOL = 1e-12
INVERTIBLE_COND = 1e8


class GridFunction:
    """Piecewise-linear interpolant of matrices sampled on a time grid."""

    def __init__(self, times: np.ndarray, values: np.ndarray):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape[0] != self.times.shape[0]:
            raise HcsError("dimension-mismatch", "grid values and times disagree in length")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise HcsError("invalid-grid", "grid times must be strictly increasing")

    def __call__(self, t: float | np.ndarray) -> np.ndarray:
        ts = self.times
        if np.ndim(t) > 0:
            t = np.asarray(t, dtype=float)
            if ts.size == 1:
                return np.broadcast_to(self.values[0], t.shape + self.values.shape[1:])
            i = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, ts.size - 2)
            w = np.clip((t - ts[i]) / (ts[i + 1] - ts[i]), 0.0, 1.0)
            w = w.reshape(w.shape + (1,) * (self.values.ndim - 1))
            return (1.0 - w) * self.values[i] + w * self.values[i + 1]
        if t <= ts[0]:
            return self.values[0]
        if t >= ts[-1]:
            return self.values[-1]
        i = int(np.searchsorted(ts, t, side="right")) - 1
        w = (t - ts[i]) / (ts[i + 1] - ts[i])
        return (1.0 - w) * self.values[i] + w * self.values[i + 1]


# --------------------------------------------------------------------------- flows


class Flow:
    """Control-affine vector field ``dx/dt = drift(t, x) + B(t, x) u``."""

    state_dim: int
    input_dim: int

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def drift_jac(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def input_matrix(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def input_matrix_jac(self, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """``d(B(t, x) u)/dx``; zero for state-independent input matrices."""
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.state_dim, self.state_dim))

    def f(self, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        b = self.input_matrix(t, x)
        return self.drift(t, x) + np.einsum("...ij,...j->...i", b, u)

    def jac_x(self, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.drift_jac(t, x) + self.input_matrix_jac(t, x, u)

    def jac_u(self, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.input_matrix(t, x)

    def noise_gain(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.input_matrix(t, x)


class LinearFlow(Flow):
    """``dx/dt = A(t) x + B(t) u`` with gridded, linearly interpolated matrices."""

    def __init__(self, times: np.ndarray, a: np.ndarray, b: np.ndarray):
        times = np.atleast_1d(np.asarray(times, dtype=float))
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if a.ndim == 2:
            a = np.broadcast_to(a, (times.size,) + a.shape).copy()
        if b.ndim == 2:
            b = np.broadcast_to(b, (times.size,) + b.shape).copy()
        self.a = GridFunction(times, a)
        self.b = GridFunction(times, b)
        self.state_dim = a.shape[1]
        self.input_dim = b.shape[2]
        if a.shape[1:] != (self.state_dim, self.state_dim) or b.shape[1] != self.state_dim:
            raise HcsError("dimension-mismatch", "A must be n x n and B must be n x m")

    def drift(self, t, x):
        return np.einsum("...ij,...j->...i", self.a(t), x)

    def drift_jac(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.a(t), x.shape[:-1] + (self.state_dim, self.state_dim))

    def input_matrix(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.b(t), x.shape[:-1] + (self.state_dim, self.input_dim))


class BallFlow(Flow):
    """Vertical ball under gravity with a vertical force input, state ``[z, zdot]``."""

    state_dim = 2
    input_dim = 1

    def __init__(self, mass: float = 1.0, gravity: float = 9.81):
        self.mass = float(mass)
        self.gravity = float(gravity)

    def drift(self, t, x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        out[..., 0] = x[..., 1]
        out[..., 1] = -self.gravity
        return out

    def f(self, t, x, u):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        out[..., 0] = x[..., 1]
        out[..., 1] = np.asarray(u)[..., 0] / self.mass - self.gravity
        return out

    def drift_jac(self, t, x):
        x = np.asarray(x, dtype=float)
        j = np.zeros(x.shape[:-1] + (2, 2))
        j[..., 0, 1] = 1.0
        return j

    def input_matrix(self, t, x):
        x = np.asarray(x, dtype=float)
        b = np.zeros(x.shape[:-1] + (2, 1))
        b[..., 1, 0] = 1.0 / self.mass
        return b


class SlipStanceFlow(Flow):
    """Stance phase of the spring-loaded inverted pendulum, state ``[theta, thetadot, r, rdot]``.

    ``theta`` is the leg angle from the ground. The input matrix is
    ``[[0, 0], [0, 0], [m/r^2, 0], [0, k/m]]``.
    """

    state_dim = 4
    input_dim = 2

    def __init__(self, r0: float = 1.0, mass: float = 0.5, stiffness: float = 25.0, gravity: float = 9.81):
        self.r0 = float(r0)
        self.mass = float(mass)
        self.stiffness = float(stiffness)
        self.gravity = float(gravity)

    def drift(self, t, x):
        x = np.asarray(x, dtype=float)
        th, thd, r, rd = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        g, k, m = self.gravity, self.stiffness, self.mass
        out = np.empty_like(x)
        out[..., 0] = thd
        out[..., 1] = (-2.0 * thd * rd - g * np.cos(th)) / r
        out[..., 2] = rd
        out[..., 3] = k * (self.r0 - r) / m - g * np.sin(th) + thd**2 * r
        return out

    def f(self, t, x, u):
        out = self.drift(t, x)
        u = np.asarray(u, dtype=float)
        out[..., 2] += self.mass / x[..., 2] ** 2 * u[..., 0]
        out[..., 3] += self.stiffness / self.mass * u[..., 1]
        return out

    def drift_jac(self, t, x):
        x = np.asarray(x, dtype=float)
        th, thd, r, rd = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        g, k, m = self.gravity, self.stiffness, self.mass
        j = np.zeros(x.shape[:-1] + (4, 4))
        j[..., 0, 1] = 1.0
        j[..., 1, 0] = g * np.sin(th) / r
        j[..., 1, 1] = -2.0 * rd / r
        j[..., 1, 2] = (2.0 * thd * rd + g * np.cos(th)) / r**2
        j[..., 1, 3] = -2.0 * thd / r
        j[..., 2, 3] = 1.0
        j[..., 3, 0] = -g * np.cos(th)
        j[..., 3, 1] = 2.0 * thd * r
        j[..., 3, 2] = -k / m + thd**2
        return j

    def input_matrix(self, t, x):
        x = np.asarray(x, dtype=float)
        r = x[..., 2]
        b = np.zeros(x.shape[:-1] + (4, 2))
        b[..., 2, 0] = self.mass / r**2
        b[..., 3, 1] = self.stiffness / self.mass
        return b

    def input_matrix_jac(self, t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        j = np.zeros(x.shape[:-1] + (4, 4))
        j[..., 2, 2] = -2.0 * self.mass * u[..., 0] / x[..., 2] ** 3
        return j


class SlipFlightFlow(Flow):
    """Flight phase: double integrator body ``[px, vx, pz, vz]`` plus leg angle ``theta``.

    Inputs are the two body accelerations and the leg angular velocity.
    """

    state_dim = 5
    input_dim = 3

    _B = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])

    def __init__(self, gravity: float = 9.81):
        self.gravity = float(gravity)

    def drift(self, t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., 0] = x[..., 1]
        out[..., 2] = x[..., 3]
        out[..., 3] = -self.gravity
        return out

    def f(self, t, x, u):
        out = self.drift(t, x)
        u = np.asarray(u, dtype=float)
        out[..., 1] += u[..., 0]
        out[..., 3] += u[..., 1]
        out[..., 4] += u[..., 2]
        return out

    def drift_jac(self, t, x):
        x = np.asarray(x, dtype=float)
        j = np.zeros(x.shape[:-1] + (5, 5))
        j[..., 0, 1] = 1.0
        j[..., 2, 3] = 1.0
        return j

    def input_matrix(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self._B, x.shape[:-1] + (5, 3))


# ------------------------------------------------------------------ guards, resets


class Guard:
    """Scalar ``g(t, x)``; positive inside the source mode."""

    def value(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_x(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_t(self, t: float, x: np.ndarray) -> float:
        return 0.0


class LinearGuard(Guard):
    """``g = c . x + a t + b``."""

    def __init__(self, coeffs: Sequence[float], time_coeff: float = 0.0, offset: float = 0.0):
        self.coeffs = np.asarray(coeffs, dtype=float)
        self.time_coeff = float(time_coeff)
        self.offset = float(offset)

    def value(self, t, x):
        return np.asarray(x, dtype=float) @ self.coeffs + self.time_coeff * t + self.offset

    def grad_x(self, t, x):
        return self.coeffs.copy()

    def grad_t(self, t, x):
        return self.time_coeff


class TouchdownGuard(Guard):
    """SLIP flight guard ``pz - r0 sin(theta)``: the toe reaches the ground."""

    def __init__(self, r0: float = 1.0):
        self.r0 = float(r0)

    def value(self, t, x):
        x = np.asarray(x, dtype=float)
        return x[..., 2] - self.r0 * np.sin(x[..., 4])

    def grad_x(self, t, x):
        return np.array([0.0, 0.0, 1.0, 0.0, -self.r0 * np.cos(x[4])])


class FunctionGuard(Guard):
    """Guard from user callables; used for ad-hoc systems in tests."""

    def __init__(self, value: Callable, grad_x: Callable, grad_t: Callable | None = None):
        self._value = value
        self._grad_x = grad_x
        self._grad_t = grad_t

    def value(self, t, x):
        return self._value(t, x)

    def grad_x(self, t, x):
        return np.asarray(self._grad_x(t, x), dtype=float)

    def grad_t(self, t, x):
        return 0.0 if self._grad_t is None else float(self._grad_t(t, x))


class Reset:
    def apply(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jac_x(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jac_t(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.zeros(self.jac_x(t, x).shape[0])


class LinearReset(Reset):
    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))

    def apply(self, t, x):
        return np.einsum("ij,...j->...i", self.matrix, x)

    def jac_x(self, t, x):
        return self.matrix.copy()


class LiftoffReset(Reset):
    """SLIP stance -> flight: polar leg state to Cartesian body state plus leg angle."""

    def __init__(self, r0: float = 1.0, toe_x: float = 0.0):
        self.r0 = float(r0)
        self.toe_x = float(toe_x)

    def apply(self, t, x):
        x = np.asarray(x, dtype=float)
        th, thd, r, rd = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        c, s, r0 = np.cos(th), np.sin(th), self.r0
        return np.stack(
            [self.toe_x + r0 * c, rd * c - r * thd * s, r0 * s, r0 * thd * c + rd * s, th], axis=-1
        )

    def jac_x(self, t, x):
        th, thd, r, rd = x
        c, s, r0 = np.cos(th), np.sin(th), self.r0
        return np.array(
            [
                [-r0 * s, 0.0, 0.0, 0.0],
                [-rd * s - r * thd * c, -r * s, -thd * s, c],
                [r0 * c, 0.0, 0.0, 0.0],
                [-r0 * thd * s + rd * c, r0 * c, 0.0, s],
                [1.0, 0.0, 0.0, 0.0],
            ]
        )


class TouchdownReset(Reset):
    """SLIP flight -> stance, toe placed at the origin."""

    def __init__(self, r0: float = 1.0):
        self.r0 = float(r0)

    def apply(self, t, x):
        x = np.asarray(x, dtype=float)
        px, vx, pz, vz, th = (x[..., i] for i in range(5))
        r0 = self.r0
        return np.stack(
            [th, (px * vz - pz * vx) / r0**2, np.full_like(th, r0), -vx * np.cos(th) + vz * np.sin(th)],
            axis=-1,
        )

    def jac_x(self, t, x):
        px, vx, pz, vz, th = x
        r2 = self.r0**2
        return np.array(
            [
                [0.0, 0.0, 0.0, 0.0, 1.0],
                [vz / r2, -pz / r2, -vx / r2, px / r2, 0.0],
                [0.0, 0.0, 0.0, 0.0, 0.0],
                [0.0, -np.cos(th), 0.0, np.sin(th), vx * np.sin(th) + vz * np.cos(th)],
            ]
        )


# --------------------------------------------------------------------- containers


@dataclass(frozen=True)
class ModeSpec:
    mode_id: int
    flow: Flow
    state_cost: np.ndarray | GridFunction | None = None

    @property
    def state_dim(self) -> int:
        return self.flow.state_dim

    @property
    def input_dim(self) -> int:
        return self.flow.input_dim

    def q_at(self, t: float) -> np.ndarray:
        if self.state_cost is None:
            return np.zeros((self.state_dim, self.state_dim))
        if isinstance(self.state_cost, GridFunction):
            return self.state_cost(t)
        return np.asarray(self.state_cost, dtype=float)


@dataclass(frozen=True)
class TransitionSpec:
    from_mode: int
    to_mode: int
    guard: Guard
    reset: Reset
    direction: int = -1  # -1: g goes + -> <=0, +1: g goes - -> >=0, 0: any sign change

    def crosses(self, g0: float, g1: float) -> bool:
        if self.direction < 0:
            return g0 > 0.0 and g1 <= 0.0
        if self.direction > 0:
            return g0 < 0.0 and g1 >= 0.0
        return (g0 != 0.0) and (g0 * g1 <= 0.0)


@dataclass(frozen=True)
class HybridSystemSpec:
    modes: dict[int, ModeSpec]
    transitions: tuple[TransitionSpec, ...]
    initial_mode: int
    dt: float
    horizon: float
    name: str = "custom"

    def __post_init__(self):
        if self.dt <= 0:
            raise HcsError("invalid-grid", "dt must be positive")
        for tr in self.transitions:
            if tr.from_mode not in self.modes or tr.to_mode not in self.modes:
                raise HcsError("unknown-mode", f"transition {tr.from_mode}->{tr.to_mode}")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def transitions_from(self, mode_id: int) -> list[TransitionSpec]:
        return [tr for tr in self.transitions if tr.from_mode == mode_id]

    @property
    def max_state_dim(self) -> int:
        return max(m.state_dim for m in self.modes.values())

    @property
    def max_input_dim(self) -> int:
        return max(m.input_dim for m in self.modes.values())


@dataclass(frozen=True)
class SaltationEvent:
    from_mode: int
    to_mode: int
    step: int
    t_minus: float
    t_plus: float
    x_minus: np.ndarray
    x_plus: np.ndarray
    u_minus: np.ndarray
    u_plus: np.ndarray
    xi: np.ndarray

    @property
    def condition_number(self) -> float:
        if self.xi.shape[0] != self.xi.shape[1]:
            return np.inf
        return float(np.linalg.cond(self.xi))

    @property
    def invertible(self) -> bool:
        return self.condition_number <= INVERTIBLE_COND


@dataclass
class TrajectoryBundle:
    """Deterministic hybrid trajectory on the system grid.

    ``states`` is NaN-padded to the largest state dimension; ``segment[k]``
    counts the events that happened before node ``k``. The control ``controls[k]``
    acts on ``[t_k, t_{k+1})`` in the mode active at ``t_k``.
    """

    times: np.ndarray
    states: np.ndarray
    modes: np.ndarray
    segment: np.ndarray
    controls: np.ndarray
    events: list[SaltationEvent] = field(default_factory=list)

    def state(self, k: int) -> np.ndarray:
        x = self.states[k]
        return x[~np.isnan(x)]

    @property
    def mode_sequence(self) -> list[int]:
        seq = [int(self.modes[0])]
        seq.extend(ev.to_mode for ev in self.events)
        return seq

    @property
    def final_state(self) -> np.ndarray:
        return self.state(len(self.times) - 1)


# ------------------------------------------------------------------- integration


def rk4_step(flow: Flow, t: float, x: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    k1 = flow.f(t, x, u)
    k2 = flow.f(t + 0.5 * h, x + 0.5 * h * k1, u)
    k3 = flow.f(t + 0.5 * h, x + 0.5 * h * k2, u)
    k4 = flow.f(t + h, x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def adapt_control(u: np.ndarray, m: int) -> np.ndarray:
    """Hold a control across an event: truncate or zero-pad to the new input size."""
    out = np.zeros(m)
    k = min(m, u.shape[-1])
    out[:k] = u[:k]
    return out


def _bisect_crossing(fn: Callable[[float], float], g_start: float, tol: float, max_iter: int = 200):
    """Root of ``fn`` on (0, 1] given ``fn(0) = g_start`` and a sign change by ``fn(1)``.

    Brent's method resolves the crossing to near machine precision in ``theta``, which
    keeps event times (and any cost built on them) smooth in the initial data.
    Plain bisection is the fallback when the end values do not bracket a root.
    """
    g_end = fn(1.0)
    if abs(g_end) <= tol and g_end == 0.0:
        return 1.0
    if g_start != 0.0 and np.sign(g_start) != np.sign(g_end):
        return float(brentq(fn, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=max_iter))
    lo, hi = 0.0, 1.0
    g_lo = g_start
    best = (1.0, g_end)
    if abs(best[1]) <= tol:
        return best[0]
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        g_mid = fn(mid)
        if abs(g_mid) < abs(best[1]):
            best = (mid, g_mid)
        if abs(g_mid) <= tol or hi - lo <= 1e-16:
            break
        if g_mid != 0.0 and np.sign(g_mid) == np.sign(g_lo):
            lo, g_lo = mid, g_mid
        else:
            hi = mid
    return best[0]


def _crossing_denominator(mode: ModeSpec, tr: TransitionSpec, t: float, x: np.ndarray, u: np.ndarray) -> float:
    return float(tr.guard.grad_t(t, x) + tr.guard.grad_x(t, x) @ mode.flow.f(t, x, u))


def detect_event(
    mode: ModeSpec,
    transition: TransitionSpec,
    times: np.ndarray,
    states: np.ndarray,
    controls: np.ndarray,
) -> tuple[float, np.ndarray] | None:
    """First guard crossing of ``transition`` along a sampled trajectory.

    The crossing interval is refined by bisection on a partial RK4 step from
    the grid node before the crossing, holding that node's control, until the
    crossing time is resolved to near machine precision. Returns ``None`` when the guard never
    changes sign.
    """
    guard = transition.guard
    g_prev = float(guard.value(times[0], states[0]))
    for k in range(len(times) - 1):
        g_next = float(guard.value(times[k + 1], states[k + 1]))
        if transition.crosses(g_prev, g_next):
            t0, x0, u = times[k], states[k], controls[k]
            h = times[k + 1] - t0
            tol = 1e-10 * (1.0 + abs(g_prev))

            def g_at(theta, t0=t0, x0=x0, u=u, h=h):
                return float(guard.value(t0 + theta * h, rk4_step(mode.flow, t0, x0, u, theta * h)))

            theta = _bisect_crossing(g_at, g_prev, tol)
            t_minus = t0 + theta * h
            x_minus = rk4_step(mode.flow, t0, x0, u, theta * h)
            if abs(_crossing_denominator(mode, transition, t_minus, x_minus, u)) < GRAZING_TOL:
                raise HcsError("tangential-crossing", f"guard crossed tangentially at t={t_minus:.6g}")
            return t_minus, x_minus
        g_prev = g_next
    return None


def saltation_matrix(
    flow_pre: Flow,
    flow_post: Flow,
    transition: TransitionSpec,
    t_minus: float,
    x_minus: np.ndarray,
    u_minus: np.ndarray,
    u_plus: np.ndarray,
) -> np.ndarray:
    """First-order map of pre-event perturbations to post-event perturbations.

    ``Xi = dR/dx + (F_post - dR/dx F_pre - dR/dt) dg/dx / (dg/dt + dg/dx F_pre)``
    with ``F_post`` evaluated at the reset state.
    """
    x_minus = np.asarray(x_minus, dtype=float)
    d_rx = np.atleast_2d(transition.reset.jac_x(t_minus, x_minus))
    d_rt = np.asarray(transition.reset.jac_t(t_minus, x_minus), dtype=float)
    d_gx = np.asarray(transition.guard.grad_x(t_minus, x_minus), dtype=float)
    d_gt = float(transition.guard.grad_t(t_minus, x_minus))
    f_pre = flow_pre.f(t_minus, x_minus, u_minus)
    x_plus = transition.reset.apply(t_minus, x_minus)
    f_post = flow_post.f(t_minus, x_plus, u_plus)
    n_pre, n_post = flow_pre.state_dim, flow_post.state_dim
    if d_rx.shape != (n_post, n_pre) or d_gx.shape != (n_pre,) or f_post.shape != (n_post,):
        raise HcsError(
            "dimension-mismatch",
            f"reset Jacobian {d_rx.shape}, guard gradient {d_gx.shape}, modes {n_pre}->{n_post}",
        )
    denom = d_gt + d_gx @ f_pre
    if abs(denom) < GRAZING_TOL:
        raise HcsError("grazing", f"saltation denominator {denom:.3e}")
    return d_rx + np.outer(f_post - d_rx @ f_pre - d_rt, d_gx) / denom


Policy = Callable[[int, float, np.ndarray, int, int], np.ndarray]


def rollout_deterministic(
    system: HybridSystemSpec,
    x0: np.ndarray,
    controls: np.ndarray | Policy,
    horizon: float | None = None,
    *,
    max_events: int = 16,
    initial_mode: int | None = None,
) -> TrajectoryBundle:
    """Fixed-step RK4 rollout with exact nonlinear resets at guard crossings.

    ``controls`` is either an ``(N, m_max)`` array (each row read in the mode
    active at the start of the step) or a policy ``(k, t, x, segment, mode) -> u``.
    Inside a step that contains an event the pre-event control is held, adapted
    to the post-event input size.
    """
    dt = system.dt
    n_steps = system.steps if horizon is None else int(round(horizon / dt))
    times = np.arange(n_steps + 1) * dt
    n_max, m_max = system.max_state_dim, system.max_input_dim
    states = np.full((n_steps + 1, n_max), np.nan)
    modes = np.zeros(n_steps + 1, dtype=int)
    segment = np.zeros(n_steps + 1, dtype=int)
    used_controls = np.zeros((n_steps, m_max))
    events: list[SaltationEvent] = []

    mode = system.modes[system.initial_mode if initial_mode is None else initial_mode]
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (mode.state_dim,):
        raise HcsError("dimension-mismatch", f"x0 has shape {x.shape}, mode expects {mode.state_dim}")
    states[0, : x.size] = x
    modes[0] = mode.mode_id
    seg = 0
    transitions = {mid: system.transitions_from(mid) for mid in system.modes}
    g_cache: list[float] | None = None

    for k in range(n_steps):
        if callable(controls):
            u = np.asarray(controls(k, times[k], x, seg, mode.mode_id), dtype=float)
        else:
            u = np.asarray(controls[k, : mode.input_dim], dtype=float)
        used_controls[k, : u.size] = u
        t, t_end = times[k], times[k + 1]
        while True:
            h = t_end - t
            x_new = rk4_step(mode.flow, t, x, u, h)
            hit = None
            outgoing = transitions[mode.mode_id]
            if g_cache is None:
                g_cache = [float(tr.guard.value(t, x)) for tr in outgoing]
            g_next = [float(tr.guard.value(t_end, x_new)) for tr in outgoing]
            for tr, g0, g1 in zip(outgoing, g_cache, g_next):
                if not tr.crosses(g0, g1):
                    continue
                tol = 1e-10 * (1.0 + abs(g0))

                def g_at(theta, tr=tr, t=t, x=x, u=u, h=h):
                    return float(tr.guard.value(t + theta * h, rk4_step(mode.flow, t, x, u, theta * h)))

                theta = _bisect_crossing(g_at, g0, tol)
                if hit is None or theta < hit[0]:
                    hit = (theta, tr)
            if hit is None:
                x = x_new
                g_cache = g_next
                break
            theta, tr = hit
            t_minus = t + theta * h
            x_minus = rk4_step(mode.flow, t, x, u, theta * h)
            if abs(_crossing_denominator(mode, tr, t_minus, x_minus, u)) < GRAZING_TOL:
                raise HcsError("tangential-crossing", f"guard crossed tangentially at t={t_minus:.6g}")
            post = system.modes[tr.to_mode]
            u_plus = adapt_control(u, post.input_dim)
            xi = saltation_matrix(mode.flow, post.flow, tr, t_minus, x_minus, u, u_plus)
            x_plus = np.asarray(tr.reset.apply(t_minus, x_minus), dtype=float)
            events.append(
                SaltationEvent(
                    from_mode=mode.mode_id,
                    to_mode=post.mode_id,
                    step=k,
                    t_minus=t_minus,
                    t_plus=t_minus,
                    x_minus=x_minus,
                    x_plus=x_plus,
                    u_minus=u.copy(),
                    u_plus=u_plus,
                    xi=xi,
                )
            )
            if len(events) > max_events:
                raise HcsError("zeno-guard", f"more than {max_events} events in the horizon")
            mode, x, u, t, seg = post, x_plus, u_plus, t_minus, seg + 1
            g_cache = None
        states[k + 1, : x.size] = x
        modes[k + 1] = mode.mode_id
        segment[k + 1] = seg
    return TrajectoryBundle(times, states, modes, segment, used_controls, events)
