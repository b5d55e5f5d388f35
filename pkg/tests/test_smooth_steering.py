import numpy as np
import pytest
from scipy.integrate import simpson
from scipy.linalg import expm, sqrtm

from hcs import HcsError, LinearSegment, hamiltonian_kernel, steer_smooth
from hcs.smooth_steering import (
    closed_loop_transition,
    solve_smooth_cs,
    symplectic_residuals,
    terminal_pi,
)
from hcs.verify import random_segment, random_spd


def bridge_covariance(s0, s1, eps, t):
    """Entropic interpolation between two Gaussians for ``dx = u dt + sqrt(eps) dw`` on [0, 1]."""
    r = sqrtm(s0).real
    r_inv = np.linalg.inv(r)
    n = s0.shape[0]
    c = r @ sqrtm(r @ s1 @ r + 0.25 * eps**2 * np.eye(n)).real @ r_inv - 0.5 * eps * np.eye(n)
    t = np.asarray(t)[:, None, None]
    return (1 - t) ** 2 * s0 + t**2 * s1 + t * (1 - t) * (c + c.T + eps * np.eye(n))


def test_integrator_matches_entropic_interpolation():
    s0 = np.array([[0.7, 0.2], [0.2, 0.4]])
    s1 = np.array([[0.3, -0.1], [-0.1, 0.5]])
    seg = LinearSegment.constant(np.zeros((2, 2)), np.eye(2), steps=500)
    sol = steer_smooth(seg, s0, s1, 0.3)
    np.testing.assert_allclose(sol.sigma, bridge_covariance(s0, s1, 0.3, seg.times), atol=1e-12)


def test_scalar_integrator_in_the_small_noise_limit():
    # As eps -> 0 the covariance interpolates the standard deviations linearly.
    seg = LinearSegment.constant([[0.0]], [[1.0]], steps=400)
    sol = steer_smooth(seg, np.array([[0.81]]), np.array([[0.04]]), 1e-9)
    std = (1 - seg.times) * 0.9 + seg.times * 0.2
    np.testing.assert_allclose(np.sqrt(sol.sigma[:, 0, 0]), std, atol=1e-6)


def test_kernel_matches_matrix_exponential(rng):
    a = rng.normal(size=(3, 3))
    b = rng.normal(size=(3, 2))
    q = random_spd(rng, 3)
    seg = LinearSegment.constant(a, b, q, tf=0.8, steps=400)
    kernel = hamiltonian_kernel(seg)
    expected = expm(seg.hamiltonian(0, 0, 0.0) * 0.8)
    np.testing.assert_allclose(kernel.phi, expected, rtol=1e-9, atol=1e-9)
    assert symplectic_residuals(kernel).max() < 1e-10


def test_reverse_kernel_and_composition(rng):
    seg = random_segment(rng, 3, q_scale=1.0, steps=300)
    kernel = hamiltonian_kernel(seg)
    np.testing.assert_allclose(kernel.reverse().compose(kernel).phi, np.eye(6), atol=1e-10)
    assert symplectic_residuals(kernel.reverse()).max() < 1e-10


def test_time_varying_solution_hits_terminal_and_couples(rng):
    for _ in range(5):
        seg = random_segment(rng, 3, q_scale=0.5, steps=800, time_varying=True)
        s0, s1 = random_spd(rng, 3), random_spd(rng, 3)
        sol = steer_smooth(seg, s0, s1, 0.4)
        assert sol.terminal_error() < 1e-6
        assert np.nanmax(sol.coupling_residuals()) < 1e-6
        # Both closed forms describe the same Riccati trajectory.
        pi_t = terminal_pi(s0, s1, hamiltonian_kernel(seg), 0.4)
        np.testing.assert_allclose(sol.pi[-1], pi_t, rtol=1e-6, atol=1e-6)


def test_closed_loop_transition_determinant(rng):
    seg = random_segment(rng, 2, steps=400)
    sol = steer_smooth(seg, random_spd(rng, 2), random_spd(rng, 2), 0.5)
    phis = closed_loop_transition(sol.pi, seg)
    np.testing.assert_allclose(phis[0], np.eye(2))
    a_cl = seg.a - np.einsum("kij,klj,klm->kim", seg.b, seg.b, sol.pi)
    trace = np.trace(a_cl, axis1=1, axis2=2)
    assert np.log(np.linalg.det(phis[-1])) == pytest.approx(simpson(trace, x=seg.times), abs=1e-8)


def test_control_energy_with_zero_state_cost_is_finite_and_positive(rng):
    seg = random_segment(rng, 2, steps=400)
    sol = steer_smooth(seg, random_spd(rng, 2), random_spd(rng, 2), 0.5)
    assert sol.state_cost() == 0.0
    assert sol.cost() == pytest.approx(sol.control_energy()) and sol.cost() > 0


def test_uncontrollable_segment_raises():
    seg = LinearSegment.constant(np.zeros((2, 2)), np.zeros((2, 1)), steps=50)
    with pytest.raises(HcsError) as err:
        solve_smooth_cs(np.eye(2), np.eye(2), hamiltonian_kernel(seg), 0.5)
    assert err.value.kind == "singular-phi12"


def test_indefinite_boundary_raises():
    seg = LinearSegment.constant(np.zeros((2, 2)), np.eye(2), steps=50)
    with pytest.raises(HcsError) as err:
        steer_smooth(seg, np.diag([1.0, -1.0]), np.eye(2), 0.5)
    assert err.value.kind == "not-positive-definite"


@pytest.mark.parametrize(
    "times, kind",
    [(np.array([0.0]), "invalid-grid"), (np.array([0.0, 1.0, 0.5]), "invalid-grid")],
)
def test_segment_grid_validation(times, kind):
    k = len(times)
    with pytest.raises(HcsError) as err:
        LinearSegment(times, np.zeros((k, 1, 1)), np.ones((k, 1, 1)), np.zeros((k, 1, 1)))
    assert err.value.kind == kind


def test_segment_shape_validation():
    with pytest.raises(HcsError) as err:
        LinearSegment(np.array([0.0, 1.0]), np.zeros((2, 2, 2)), np.ones((2, 2, 1)), np.zeros((2, 1, 1)))
    assert err.value.kind == "dimension-mismatch"
