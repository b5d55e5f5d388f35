"""Closed-form covariance steering for a single smooth linear mode.

The linear stochastic system ``dX = A X dt + B (u dt + sqrt(eps) dW)`` with
running cost ``E int ||u||^2 + X'QX dt`` is steered from covariance ``Sigma0``
to ``SigmaT``. The optimal law is ``u = -B' Pi X`` where ``Pi`` and
``H = eps Sigma^{-1} - Pi`` solve a pair of coupled Riccati equations whose
initial values follow from the Hamiltonian transition kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import simpson, trapezoid

from .errors import HcsError
from .hybrid_model import LinearFlow, ModeSpec
from .linalg import psd_inv_sqrt, psd_sqrt, rel_frobenius, solve_checked, spd_inv, sym

RICCATI_BLOWUP = 1e12
KERNEL_RESIDUAL_LIMIT = 1e-6


@dataclass(frozen=True)
class LinearSegment:
    """Matrices ``A, B, Q`` sampled on a (possibly non-uniform) time grid.

    Between nodes the matrices are linear in time, which is also how the RK4
    stages read them.
    """

    times: np.ndarray
    a: np.ndarray
    b: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        k = len(self.times)
        n = self.a.shape[-1]
        if k < 2:
            raise HcsError("invalid-grid", "a segment needs at least two nodes")
        if np.any(np.diff(self.times) <= 0):
            raise HcsError("invalid-grid", "segment times must be strictly increasing")
        if self.a.shape != (k, n, n) or self.b.shape[:2] != (k, n) or self.q.shape != (k, n, n):
            raise HcsError("dimension-mismatch", "A, B, Q grids must match the time grid")

    @classmethod
    def constant(cls, a, b, q=None, t0: float = 0.0, tf: float = 1.0, steps: int = 1000) -> "LinearSegment":
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.asarray(b, dtype=float).reshape(a.shape[0], -1)
        q = np.zeros_like(a) if q is None else np.atleast_2d(np.asarray(q, dtype=float))
        times = np.linspace(t0, tf, steps + 1)
        rep = lambda m: np.broadcast_to(m, (steps + 1,) + m.shape).copy()
        return cls(times, rep(a), rep(b), rep(q))

    @classmethod
    def from_mode(cls, mode: ModeSpec, times: np.ndarray) -> "LinearSegment":
        if not isinstance(mode.flow, LinearFlow):
            raise HcsError("nonlinear-mode", "linearize the mode along a nominal trajectory first")
        times = np.asarray(times, dtype=float)
        a = np.stack([mode.flow.a(t) for t in times])
        b = np.stack([mode.flow.b(t) for t in times])
        q = np.stack([mode.q_at(t) for t in times])
        return cls(times, a, b, q)

    @property
    def n(self) -> int:
        return self.a.shape[-1]

    @property
    def m(self) -> int:
        return self.b.shape[-1]

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def tf(self) -> float:
        return float(self.times[-1])

    def at(self, i: int, j: int, c: float):
        """``(A, B, Q)`` at fraction ``c`` of the way from node ``i`` to node ``j``."""
        if c == 0.0:
            return self.a[i], self.b[i], self.q[i]
        if c == 1.0:
            return self.a[j], self.b[j], self.q[j]
        w = 1.0 - c
        return w * self.a[i] + c * self.a[j], w * self.b[i] + c * self.b[j], w * self.q[i] + c * self.q[j]

    def hamiltonian(self, i: int, j: int, c: float) -> np.ndarray:
        a, b, q = self.at(i, j, c)
        return np.block([[a, -b @ b.T], [-q, -a.T]])


def integrate_rk4(
    times: np.ndarray,
    x0: np.ndarray,
    rhs: Callable[[int, int, float, np.ndarray], np.ndarray],
    *,
    backward: bool = False,
    post: Callable[[np.ndarray], np.ndarray] | None = None,
    check: Callable[[int, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Classic RK4 over a node grid; ``rhs(i, j, c, x)`` evaluates between nodes ``i`` and ``j``.

    Returns the state at every node, indexed like ``times`` regardless of direction.
    """
    k = len(times) - 1
    out = np.empty((k + 1,) + np.shape(x0))
    x = np.array(x0, dtype=float)
    out[k if backward else 0] = x
    for step in range(k):
        i = k - step if backward else step
        j = i - 1 if backward else i + 1
        h = times[j] - times[i]
        k1 = rhs(i, j, 0.0, x)
        k2 = rhs(i, j, 0.5, x + 0.5 * h * k1)
        k3 = rhs(i, j, 0.5, x + 0.5 * h * k2)
        k4 = rhs(i, j, 1.0, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if post is not None:
            x = post(x)
        if check is not None:
            check(j, x)
        out[j] = x
    return out


# ------------------------------------------------------------------------- kernels


@dataclass(frozen=True)
class KernelBlocks:
    """A ``2n x 2n`` Hamiltonian transition kernel and its ``n x n`` blocks.

    ``history`` optionally holds ``Phi(t_i, t_from)`` at every grid node.
    """

    phi: np.ndarray
    t_from: float
    t_to: float
    direction: str = "forward"
    history: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.phi.shape[0] // 2

    @property
    def phi11(self) -> np.ndarray:
        return self.phi[: self.n, : self.n]

    @property
    def phi12(self) -> np.ndarray:
        return self.phi[: self.n, self.n :]

    @property
    def phi21(self) -> np.ndarray:
        return self.phi[self.n :, : self.n]

    @property
    def phi22(self) -> np.ndarray:
        return self.phi[self.n :, self.n :]

    def reverse(self) -> "KernelBlocks":
        """``Psi = Phi(t_from, t_to)``, the inverse kernel."""
        direction = "reverse" if self.direction == "forward" else "forward"
        return KernelBlocks(np.linalg.inv(self.phi), self.t_to, self.t_from, direction)

    def compose(self, earlier: "KernelBlocks") -> "KernelBlocks":
        """``self @ earlier``: first ``earlier``, then ``self``."""
        return KernelBlocks(self.phi @ earlier.phi, earlier.t_from, self.t_to)


def symplectic_residuals(phi: np.ndarray | KernelBlocks) -> np.ndarray:
    """Relative residuals of the six block identities of a Hamiltonian kernel.

    Each residual is ``||lhs - rhs||_F`` divided by the sum of the norms of the
    two products on the left, so kernels with large entries are not penalized
    for roundoff.
    """
    if isinstance(phi, KernelBlocks):
        phi = phi.phi
    n = phi.shape[0] // 2
    p11, p12, p21, p22 = phi[:n, :n], phi[:n, n:], phi[n:, :n], phi[n:, n:]
    eye = np.eye(n)
    pairs = [
        (p11.T @ p22, p21.T @ p12, eye),
        (p12.T @ p22, p22.T @ p12, 0.0),
        (p21.T @ p11, p11.T @ p21, 0.0),
        (p11 @ p22.T, p12 @ p21.T, eye),
        (p12 @ p11.T, p11 @ p12.T, 0.0),
        (p21 @ p22.T, p22 @ p21.T, 0.0),
    ]
    out = np.empty(6)
    for idx, (x, y, rhs) in enumerate(pairs):
        scale = max(1.0, np.linalg.norm(x) + np.linalg.norm(y))
        out[idx] = np.linalg.norm(x - y - rhs) / scale
    return out


def hamiltonian_kernel(
    segment: LinearSegment, *, keep_history: bool = False, check: bool = True
) -> KernelBlocks:
    """Integrate ``dPhi/dt = M(t) Phi`` from ``Phi(t0, t0) = I`` with RK4 on the segment grid."""
    n2 = 2 * segment.n

    def rhs(i, j, c, x):
        return segment.hamiltonian(i, j, c) @ x

    hist = integrate_rk4(segment.times, np.eye(n2), rhs)
    phi = hist[-1]
    if check:
        worst = float(symplectic_residuals(phi).max())
        if not np.isfinite(worst) or worst > KERNEL_RESIDUAL_LIMIT:
            raise HcsError("ill-conditioned-kernel", f"identity residual {worst:.3e}; refine the grid")
    return KernelBlocks(phi, segment.t0, segment.tf, "forward", hist if keep_history else None)


# ---------------------------------------------------------------- closed forms


def _sqrt_term(s_a: np.ndarray, s_b: np.ndarray, blk12: np.ndarray, eps: float, kind: str) -> np.ndarray:
    """``S_a^{-1/2} (eps^2 I/4 + S_a^{1/2} X^{-1} S_b X'^{-1} S_a^{1/2})^{1/2} S_a^{-1/2}``."""
    n = s_a.shape[0]
    ra = psd_sqrt(s_a)
    ra_inv = psd_inv_sqrt(s_a)
    x_inv_sb = solve_checked(blk12, s_b, kind)
    inner = x_inv_sb @ np.linalg.inv(blk12).T
    arg = sym(0.25 * eps**2 * np.eye(n) + ra @ inner @ ra)
    return ra_inv @ psd_sqrt(arg) @ ra_inv


def solve_smooth_cs(
    sigma0: np.ndarray, sigma_t: np.ndarray, kernel: KernelBlocks, eps: float
) -> tuple[np.ndarray, np.ndarray]:
    """Initial values ``(Pi(0), H(0))`` of the optimal steering Riccati pair."""
    sigma0 = sym(np.atleast_2d(np.asarray(sigma0, dtype=float)))
    sigma_t = sym(np.atleast_2d(np.asarray(sigma_t, dtype=float)))
    s0_inv = spd_inv(sigma0)
    spd_inv(sigma_t)
    p12_inv_p11 = solve_checked(kernel.phi12, kernel.phi11, "singular-phi12")
    root = _sqrt_term(sigma0, sigma_t, kernel.phi12, eps, "singular-phi12")
    pi0 = sym(0.5 * eps * s0_inv - p12_inv_p11 - root)
    h0 = sym(eps * s0_inv - pi0)
    return pi0, h0


def terminal_pi(sigma0: np.ndarray, sigma_t: np.ndarray, kernel: KernelBlocks, eps: float) -> np.ndarray:
    """Terminal value ``Pi(T)`` from the reverse kernel; ``sigma0`` may be singular."""
    sigma0 = sym(np.atleast_2d(np.asarray(sigma0, dtype=float)))
    sigma_t = sym(np.atleast_2d(np.asarray(sigma_t, dtype=float)))
    psi = kernel.reverse() if kernel.direction == "forward" else kernel
    st_inv = spd_inv(sigma_t)
    psi12_inv_psi11 = solve_checked(psi.phi12, psi.phi11, "singular-psi12")
    root = _sqrt_term(sigma_t, sigma0, psi.phi12, eps, "singular-psi12")
    return sym(0.5 * eps * st_inv - psi12_inv_psi11 + root)


# ----------------------------------------------------------------- integrators


def _blowup_guard(j: int, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)) or np.abs(x).max() > RICCATI_BLOWUP:
        raise HcsError("riccati-blowup", f"Riccati solution escaped at node {j}")


def riccati_rhs(a: np.ndarray, b: np.ndarray, q: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """``dPi/dt = -(A'Pi + Pi A - Pi B B' Pi + Q)``."""
    pb = pi @ b
    return -(a.T @ pi + pi @ a - pb @ pb.T + q)


def h_riccati_rhs(a: np.ndarray, b: np.ndarray, q: np.ndarray, h: np.ndarray) -> np.ndarray:
    """``dH/dt = -(A'H + H A + H B B' H - Q)``."""
    hb = h @ b
    return -(a.T @ h + h @ a + hb @ hb.T - q)


def riccati_integrate(
    segment: LinearSegment, pi_boundary: np.ndarray, direction: str = "backward"
) -> np.ndarray:
    """Π on every node of ``segment``; ``pi_boundary`` is ``Pi(tf)`` (backward) or ``Pi(t0)`` (forward)."""
    if direction not in ("backward", "forward"):
        raise ValueError("direction must be 'backward' or 'forward'")

    def rhs(i, j, c, x):
        return riccati_rhs(*segment.at(i, j, c), x)

    return integrate_rk4(
        segment.times, sym(np.asarray(pi_boundary, dtype=float)), rhs,
        backward=direction == "backward", post=sym, check=_blowup_guard,
    )


def h_integrate(segment: LinearSegment, h_boundary: np.ndarray, direction: str = "forward") -> np.ndarray:
    def rhs(i, j, c, x):
        return h_riccati_rhs(*segment.at(i, j, c), x)

    return integrate_rk4(
        segment.times, sym(np.asarray(h_boundary, dtype=float)), rhs,
        backward=direction == "backward", post=sym, check=_blowup_guard,
    )


def _pi_stage(segment: LinearSegment, pis: np.ndarray, i: int, j: int, c: float) -> np.ndarray:
    """Π between nodes by cubic Hermite interpolation, using the Riccati slope at the nodes.

    Linear interpolation would cap the Lyapunov integrator at second order.
    """
    if c == 0.0:
        return pis[i]
    if c == 1.0:
        return pis[j]
    h = segment.times[j] - segment.times[i]
    di = riccati_rhs(segment.a[i], segment.b[i], segment.q[i], pis[i])
    dj = riccati_rhs(segment.a[j], segment.b[j], segment.q[j], pis[j])
    h00, h10, h01, h11 = 2 * c**3 - 3 * c**2 + 1, c**3 - 2 * c**2 + c, -2 * c**3 + 3 * c**2, c**3 - c**2
    return h00 * pis[i] + h10 * h * di + h01 * pis[j] + h11 * h * dj


def lyapunov_propagate(
    sigma_start: np.ndarray, pis: np.ndarray, segment: LinearSegment, eps: float
) -> np.ndarray:
    """Closed-loop covariance ``dSigma/dt = Acl Sigma + Sigma Acl' + eps B B'`` with ``Acl = A - B B' Pi``."""

    def rhs(i, j, c, x):
        a, b, _ = segment.at(i, j, c)
        acl = a - b @ (b.T @ _pi_stage(segment, pis, i, j, c))
        ax = acl @ x
        return ax + ax.T + eps * (b @ b.T)

    def check(j, x):
        w = np.linalg.eigvalsh(x)
        if w.min() < -1e-12 * max(1.0, abs(w).max()):
            raise HcsError("psd-violation", f"covariance eigenvalue {w.min():.3e} at node {j}")

    return integrate_rk4(segment.times, sym(np.asarray(sigma_start, dtype=float)), rhs, post=sym, check=check)


def feedback_gain(pis: np.ndarray, segment: LinearSegment) -> np.ndarray:
    """``K(t) = -B(t)' Pi(t)`` on every node, shape ``(nodes, m, n)``."""
    return -np.einsum("kji,kjl->kil", segment.b, pis)


def closed_loop_transition(pis: np.ndarray, segment: LinearSegment) -> np.ndarray:
    """``Phi_cl(t_k, t_0)`` of ``dx/dt = (A - B B' Pi) x`` at every node."""
    n = segment.n

    def rhs(i, j, c, x):
        a, b, _ = segment.at(i, j, c)
        return (a - b @ (b.T @ _pi_stage(segment, pis, i, j, c))) @ x

    return integrate_rk4(segment.times, np.eye(n), rhs)


# ------------------------------------------------------------------- solutions


@dataclass
class SteeringSolution:
    segment: LinearSegment
    pi: np.ndarray
    h: np.ndarray
    sigma: np.ndarray
    gains: np.ndarray
    epsilon: float
    sigma0: np.ndarray
    sigma_t: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.segment.times

    def coupling_residuals(self) -> np.ndarray:
        """Relative mismatch of ``eps Sigma^{-1} = Pi + H`` at every node (NaN where Σ is singular)."""
        out = np.full(len(self.times), np.nan)
        for k, s in enumerate(self.sigma):
            if np.linalg.cond(s) < 1e12:
                lhs = self.epsilon * np.linalg.inv(s)
                out[k] = rel_frobenius(self.pi[k] + self.h[k], lhs)
        return out

    def terminal_error(self) -> float:
        return rel_frobenius(self.sigma[-1], self.sigma_t)

    def control_energy(self) -> float:
        """``E int ||u||^2 dt = int tr(K Sigma K') dt`` by Simpson's rule on the node grid."""
        integrand = np.einsum("kij,kjl,kil->k", self.gains, self.sigma, self.gains)
        return float(_trapz(integrand, self.times))

    def state_cost(self) -> float:
        integrand = np.einsum("kij,kji->k", self.segment.q, self.sigma)
        return float(_trapz(integrand, self.times))

    def cost(self) -> float:
        return self.control_energy() + self.state_cost()


def _trapz(y: np.ndarray, x: np.ndarray) -> float:
    if len(x) >= 3:
        return float(simpson(y, x=x))
    return float(trapezoid(y, x=x))


def propagate_from(
    segment: LinearSegment,
    pi0: np.ndarray,
    h0: np.ndarray | None,
    sigma_start: np.ndarray,
    eps: float,
    sigma_t: np.ndarray,
) -> SteeringSolution:
    pis = riccati_integrate(segment, pi0, "forward")
    hs = h_integrate(segment, h0, "forward") if h0 is not None else np.full_like(pis, np.nan)
    sig = lyapunov_propagate(sigma_start, pis, segment, eps)
    return SteeringSolution(
        segment, pis, hs, sig, feedback_gain(pis, segment), eps, np.asarray(sigma_start), np.asarray(sigma_t)
    )


def steer_smooth(segment: LinearSegment, sigma0: np.ndarray, sigma_t: np.ndarray, eps: float) -> SteeringSolution:
    """Solve and propagate the single-mode problem on ``segment``."""
    kernel = hamiltonian_kernel(segment)
    pi0, h0 = solve_smooth_cs(sigma0, sigma_t, kernel, eps)
    return propagate_from(segment, pi0, h0, sigma0, eps, sigma_t)
