import numpy as np
import pytest

from hcs import HcsError, bouncing_ball, rollout_deterministic, saltation_matrix, slip, system_from_dict
from hcs.hybrid_model import (
    BallFlow,
    GridFunction,
    LinearGuard,
    LinearReset,
    SlipFlightFlow,
    SlipStanceFlow,
    TransitionSpec,
    detect_event,
    rk4_step,
)


def flow_map(flow, t0, x, t1, dt, u):
    """Plain RK4 under a constant control, with a short final step to land on ``t1``."""
    t, x = t0, np.asarray(x, float)
    while t1 - t > 1e-14:
        h = min(dt, t1 - t)
        x = rk4_step(flow, t, x, u, h)
        t += h
    return x


def fd_jacobian(fn, x, h=1e-6):
    x = np.asarray(x, float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fn(x + e) - fn(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


def one_event_check(system, x0, horizon):
    """Finite-difference Jacobian of the rollout against ``Phi_post Xi Phi_pre``."""
    steps = int(round(horizon / system.dt))
    u = np.zeros((steps, system.max_input_dim))
    nominal = rollout_deterministic(system, x0, u, horizon)
    assert len(nominal.events) == 1
    ev = nominal.events[0]
    pre = system.modes[ev.from_mode]
    post = system.modes[ev.to_mode]

    def final(x):
        b = rollout_deterministic(system, x, u, horizon)
        assert len(b.events) == 1
        return b.final_state

    total = fd_jacobian(final, x0)
    phi_pre = fd_jacobian(lambda x: flow_map(pre.flow, 0.0, x, ev.t_minus, system.dt, ev.u_minus), x0)
    phi_post = fd_jacobian(lambda x: flow_map(post.flow, ev.t_minus, x, horizon, system.dt, ev.u_plus), ev.x_plus)
    predicted = phi_post @ ev.xi @ phi_pre
    return np.linalg.norm(total - predicted) / np.linalg.norm(predicted)


def test_ball_impact_saltation_matches_finite_differences():
    system = bouncing_ball(dt=1e-3, horizon=0.5, initial_mode=1)
    assert one_event_check(system, np.array([1.0, -0.5]), 0.5) < 1e-6


def test_slip_liftoff_saltation_matches_finite_differences():
    system = slip(dt=1e-3, horizon=0.4)
    assert one_event_check(system, np.array([1.745, -4.0, 0.5, 0.0]), 0.4) < 1e-5


def test_ball_impact_saltation_closed_form():
    # Impact at z = 0 with velocity v: Xi = [[-e, 0], [-(1 + e) g / v, -e]].
    e, g, v = 0.6, 9.81, -3.0
    flow = BallFlow(1.0, g)
    tr = TransitionSpec(1, 2, LinearGuard([1.0, 0.0]), LinearReset(np.diag([1.0, -e])))
    xi = saltation_matrix(flow, flow, tr, 0.0, np.array([0.0, v]), np.zeros(1), np.zeros(1))
    expected = np.array([[-e, 0.0], [-(1 + e) * g / v, -e]])
    np.testing.assert_allclose(xi, expected, rtol=1e-12, atol=1e-12)


def test_slip_flow_jacobians_match_finite_differences(rng):
    for flow, x in (
        (SlipStanceFlow(), np.array([1.6, -3.0, 0.8, 0.5])),
        (SlipFlightFlow(), np.array([0.3, 1.1, 2.0, 1.0, 1.2])),
    ):
        u = rng.normal(size=flow.input_dim)
        jx = fd_jacobian(lambda y: flow.f(0.0, y, u), x)
        np.testing.assert_allclose(flow.jac_x(0.0, x, u), jx, rtol=1e-7, atol=1e-7)
        ju = fd_jacobian(lambda v: flow.f(0.0, x, v), u)
        np.testing.assert_allclose(flow.jac_u(0.0, x, u), ju, rtol=1e-7, atol=1e-7)


def test_ball_rollout_event_times_and_reset():
    system = bouncing_ball(dt=1e-3, horizon=1.0, initial_mode=1)
    bundle = rollout_deterministic(system, np.array([1.0, 0.0]), np.zeros((1000, 1)))
    t_hit = np.sqrt(2.0 / 9.81)
    impact = bundle.events[0]
    assert (impact.from_mode, impact.to_mode) == (1, 2)
    assert abs(impact.t_minus - t_hit) < 1e-10
    assert abs(impact.x_plus[1] + 0.6 * impact.x_minus[1]) < 1e-12
    apex = bundle.events[1]
    assert (apex.from_mode, apex.to_mode) == (2, 1)
    assert abs(apex.t_minus - (t_hit + 0.6 * 9.81 * t_hit / 9.81)) < 1e-10
    # Second impact after two more rise/fall halves of the bounce.
    assert abs(bundle.events[2].t_minus - (t_hit + 2 * 0.6 * t_hit)) < 1e-10
    assert bundle.mode_sequence == [1, 2, 1, 2]
    assert np.all(np.diff(bundle.segment) >= 0)


def test_detect_event_on_sampled_trajectory():
    # Free fall sampled on a coarse grid without any reset; the crossing is refined inside a step.
    system = bouncing_ball(dt=1e-2, horizon=0.6, initial_mode=1)
    flow = system.modes[1].flow
    times = np.arange(61) * 1e-2
    states = np.array([[1.0 - 0.5 * 9.81 * t**2, -9.81 * t] for t in times])
    hit = detect_event(system.modes[1], system.transitions[0], times, states, np.zeros((61, 1)))
    assert hit is not None
    assert abs(hit[0] - np.sqrt(2.0 / 9.81)) < 1e-12
    assert abs(hit[1][0]) < 1e-12
    assert flow.state_dim == 2


def test_grid_function_interpolates_and_clamps():
    g = GridFunction(np.array([0.0, 1.0, 3.0]), np.array([[0.0], [2.0], [6.0]]))
    assert g(0.5)[0] == pytest.approx(1.0)
    assert g(2.0)[0] == pytest.approx(4.0)
    assert g(-1.0)[0] == 0.0 and g(5.0)[0] == 6.0
    np.testing.assert_allclose(g(np.array([0.5, 2.0]))[:, 0], [1.0, 4.0])
    with pytest.raises(HcsError) as err:
        GridFunction(np.array([0.0, 0.0]), np.zeros((2, 1)))
    assert err.value.kind == "invalid-grid"


def test_system_from_dict_linear_and_builtin():
    sys_lin = system_from_dict({
        "dt": 0.01, "horizon": 1.0, "initial_mode": 1,
        "modes": [{"id": 1, "A": [[0, 1], [0, 0]], "B": [0, 1]}],
    })
    assert sys_lin.steps == 100
    assert sys_lin.modes[1].input_dim == 1
    ball = system_from_dict({"builtin": "bouncing_ball", "params": {"restitution": 0.8}})
    assert ball.name == "bouncing-ball"


@pytest.mark.parametrize(
    "cfg, kind",
    [
        ({"builtin": "unicycle"}, "config-error"),
        ({"dt": 0.01, "horizon": 1.0}, "config-error"),
        ({"dt": -0.1, "horizon": 1.0, "modes": [{"id": 1, "A": [[0]], "B": [[1]]}]}, "invalid-grid"),
        ({"dt": 0.1, "horizon": 1.0, "modes": [{"id": 1, "A": [[0]], "B": [[1]]}],
          "transitions": [{"from": 1, "to": 7, "guard": {"coeffs": [1]}, "reset": {"matrix": [[1]]}}]},
         "unknown-mode"),
        ({"dt": 0.1, "horizon": 1.0, "modes": [{"id": 1, "A": [[0, 1]], "B": [[1]]}]}, "dimension-mismatch"),
    ],
)
def test_system_from_dict_errors(cfg, kind):
    with pytest.raises(HcsError) as err:
        system_from_dict(cfg)
    assert err.value.kind == kind


def test_rollout_rejects_wrong_initial_state():
    with pytest.raises(HcsError) as err:
        rollout_deterministic(bouncing_ball(), np.zeros(3), np.zeros((10, 1)))
    assert err.value.kind == "dimension-mismatch"


def test_grazing_impact_is_reported():
    flow = BallFlow()
    tr = TransitionSpec(1, 2, LinearGuard([1.0, 0.0]), LinearReset(np.eye(2)))
    with pytest.raises(HcsError) as err:
        saltation_matrix(flow, flow, tr, 0.0, np.array([0.0, 0.0]), np.zeros(1), np.zeros(1))
    assert err.value.kind == "grazing"
