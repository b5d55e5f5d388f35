import numpy as np
import pytest

from hcs import HcsError, IlqrConfig, linearize_along, rollout_deterministic, solve_hilqr, system_from_dict
from hcs.hybrid_model import SlipStanceFlow, rk4_step
from hcs.nominal_ilqr import post_event_control, rk4_jacobians

DOUBLE_INTEGRATOR = {
    "dt": 0.02, "horizon": 1.0, "initial_mode": 1,
    "modes": [{"id": 1, "A": [[0, 1], [0, 0]], "B": [[0], [1]]}],
}


def test_linear_quadratic_case_matches_least_squares():
    """Without events the problem is a linear least-squares problem in the control sequence."""
    system = system_from_dict(DOUBLE_INTEGRATOR)
    x0, goal, q = np.array([1.0, 0.0]), np.array([0.0, 0.0]), 50.0 * np.eye(2)
    cfg = IlqrConfig(goal=goal, terminal_weight=q, tolerance=1e-12)
    plan = solve_hilqr(system, x0, cfg)
    n = system.steps
    # x_N = F x0 + G u: columns of G from unit controls, F from the free response.
    free = rollout_deterministic(system, x0, np.zeros((n, 1))).final_state
    g = np.stack([rollout_deterministic(system, np.zeros(2), np.eye(n)[:, [k]]).final_state for k in range(n)], 1)
    lhs = system.dt * np.eye(n) + g.T @ q @ g
    u_star = np.linalg.solve(lhs, -g.T @ q @ (free - goal))
    e = free + g @ u_star - goal
    best = 0.5 * system.dt * u_star @ u_star + 0.5 * e @ q @ e
    assert plan.converged
    assert plan.cost == pytest.approx(best, rel=1e-9)
    np.testing.assert_allclose(plan.bundle.controls[:, 0], u_star, atol=1e-7)


def test_rk4_jacobians_match_finite_differences(rng):
    flow = SlipStanceFlow()
    x = np.array([1.6, -3.0, 0.8, 0.5])
    u = rng.normal(size=2)
    a, b = rk4_jacobians(flow, np.array(0.1), x, u, np.array(0.01))
    h = 1e-6
    a_fd = np.stack([(rk4_step(flow, 0.1, x + h * e, u, 0.01) - rk4_step(flow, 0.1, x - h * e, u, 0.01)) / (2 * h)
                     for e in np.eye(4)], 1)
    b_fd = np.stack([(rk4_step(flow, 0.1, x, u + h * e, 0.01) - rk4_step(flow, 0.1, x, u - h * e, 0.01)) / (2 * h)
                     for e in np.eye(2)], 1)
    np.testing.assert_allclose(a, a_fd, atol=1e-8)
    np.testing.assert_allclose(b, b_fd, atol=1e-8)


def test_ball_nominal_reaches_goal_through_an_impact(ball_outcome):
    plan = ball_outcome.nominal
    cfg = ball_outcome.config["nominal"]
    assert plan.converged
    assert np.all(np.diff(plan.cost_history) <= 0)
    # Apex, impact, and a final apex where the goal asks for zero velocity.
    assert plan.bundle.mode_sequence == [2, 1, 2, 1]
    # The goal enters through a finite terminal weight, so the arrival is close but not exact.
    assert np.linalg.norm(plan.bundle.final_state - np.asarray(cfg["goal"])) < 0.1


def test_ball_linearization_merges_the_apex(ball_outcome):
    lin = ball_outcome.linearized
    assert lin.merged_transitions == {(2, 1)}
    assert len(lin.segments) == 2 and len(lin.xis) == 1
    assert lin.segment_modes == [2, 2]
    impact = next(ev for ev in ball_outcome.nominal.bundle.events if ev.from_mode == 1)
    assert lin.event_times == [impact.t_minus]
    # Segments meet at the impact with the pre- and post-impact states.
    np.testing.assert_allclose(lin.nominal_states[0][-1], impact.x_minus)
    np.testing.assert_allclose(lin.nominal_states[1][0], impact.x_plus)


def test_post_event_control_extrapolates_a_linear_profile():
    system = system_from_dict({
        "dt": 0.1, "horizon": 1.0, "initial_mode": 1,
        "modes": [{"id": 1, "A": [[0]], "B": [[1]]}, {"id": 2, "A": [[0]], "B": [[1]]}],
        "transitions": [{"from": 1, "to": 2, "guard": {"coeffs": [0], "time_coeff": 1.0, "offset": -0.35,
                                                       "direction": 1}, "reset": {"matrix": [[1]]}}],
    })
    ts = np.arange(10) * 0.1 + 0.05
    controls = (2.0 + 3.0 * ts)[:, None]  # control sampled at step midpoints
    bundle = rollout_deterministic(system, np.zeros(1), controls)
    up = post_event_control(bundle, 0, 0.1)
    assert up[0] == pytest.approx(2.0 + 3.0 * 0.35, rel=1e-12)


def test_linearization_without_merging_keeps_every_event(ball_outcome):
    lin = linearize_along(ball_outcome.nominal.bundle, ball_outcome.system, merge_identity=False)
    assert len(lin.segments) == len(ball_outcome.nominal.bundle.events) + 1
    assert not lin.merged_transitions


def test_config_validation():
    with pytest.raises(HcsError):
        IlqrConfig(goal=np.zeros(2), terminal_weight=np.eye(2), control_weight=0.0)
    with pytest.raises(HcsError):
        IlqrConfig(goal=np.zeros(2), terminal_weight=-np.eye(2))
    system = system_from_dict(DOUBLE_INTEGRATOR)
    with pytest.raises(HcsError) as err:
        solve_hilqr(system, np.zeros(2), IlqrConfig(goal=np.zeros(3), terminal_weight=np.eye(3)))
    assert err.value.kind == "dimension-mismatch"
