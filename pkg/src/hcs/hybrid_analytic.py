"""Closed-form hybrid covariance steering through invertible saltation jumps.

Each jump ``X+ = Xi X-`` acts on the Hamiltonian state ``[X; Lambda]`` as
``blockdiag(Xi, Xi'^{-1})``. Composing segment kernels with these jump kernels
gives a hybrid kernel that keeps the symplectic block identities, so the smooth
closed form applies unchanged with the hybrid blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import HcsError
from .hybrid_model import INVERTIBLE_COND
from .linalg import blockdiag, rel_frobenius, sym
from .smooth_steering import (
    KernelBlocks,
    LinearSegment,
    SteeringSolution,
    feedback_gain,
    h_integrate,
    hamiltonian_kernel,
    lyapunov_propagate,
    riccati_integrate,
    solve_smooth_cs,
    symplectic_residuals,
)

COMPOSE_RESIDUAL_LIMIT = 1e-6


def check_invertible(xi: np.ndarray) -> float:
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    if xi.shape[0] != xi.shape[1]:
        raise HcsError("noninvertible-saltation", f"saltation matrix is {xi.shape[0]}x{xi.shape[1]}")
    cond = float(np.linalg.cond(xi))
    if not np.isfinite(cond) or cond > INVERTIBLE_COND:
        raise HcsError("noninvertible-saltation", f"saltation condition number {cond:.3e}")
    return cond


def jump_kernel(xi: np.ndarray, t: float = np.nan) -> KernelBlocks:
    """``blockdiag(Xi, Xi'^{-1})``, the kernel of an instantaneous invertible jump."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    check_invertible(xi)
    return KernelBlocks(blockdiag(xi, np.linalg.inv(xi).T), t, t, "forward")


@dataclass(frozen=True)
class HybridKernel:
    segment_kernels: tuple[KernelBlocks, ...]
    jump_kernels: tuple[KernelBlocks, ...]
    composed: KernelBlocks


def compose_hybrid_kernel(
    segment_kernels: list[KernelBlocks], jump_kernels: list[KernelBlocks], *, check: bool = True
) -> HybridKernel:
    """``Phi_J ... Phi^Xi_2 Phi_2 Phi^Xi_1 Phi_1`` for alternating segments and jumps."""
    if len(segment_kernels) != len(jump_kernels) + 1:
        raise HcsError("dimension-mismatch", "need exactly one more segment than jumps")
    phi = segment_kernels[0].phi
    for jk, sk in zip(jump_kernels, segment_kernels[1:]):
        if jk.phi.shape[1] != phi.shape[0] or sk.phi.shape[1] != jk.phi.shape[0]:
            raise HcsError("dimension-mismatch", "kernel chain dimensions disagree")
        phi = sk.phi @ (jk.phi @ phi)
    composed = KernelBlocks(phi, segment_kernels[0].t_from, segment_kernels[-1].t_to)
    if check:
        worst = float(symplectic_residuals(composed).max())
        if not np.isfinite(worst) or worst > COMPOSE_RESIDUAL_LIMIT:
            raise HcsError("identity-residual-exceeded", f"composed kernel residual {worst:.3e}")
    return HybridKernel(tuple(segment_kernels), tuple(jump_kernels), composed)


def build_hybrid_kernel(segments: list[LinearSegment], xis: list[np.ndarray]) -> HybridKernel:
    seg_k = [hamiltonian_kernel(s) for s in segments]
    jump_k = [jump_kernel(x, s.tf) for x, s in zip(xis, segments)]
    return compose_hybrid_kernel(seg_k, jump_k)


def solve_hybrid_cs(
    sigma0: np.ndarray, sigma_t: np.ndarray, hk: HybridKernel, eps: float
) -> tuple[np.ndarray, np.ndarray]:
    """Initial Riccati pair for the hybrid problem: the smooth closed form on the composed kernel."""
    return solve_smooth_cs(sigma0, sigma_t, hk.composed, eps)


@dataclass(frozen=True)
class JumpRecord:
    t: float
    xi: np.ndarray
    sigma_minus: np.ndarray
    sigma_plus: np.ndarray
    pi_minus: np.ndarray
    pi_plus: np.ndarray
    h_minus: np.ndarray | None = None
    h_plus: np.ndarray | None = None
    pi_plus_independent: np.ndarray | None = None

    def sigma_residual(self) -> float:
        """Absolute max-norm mismatch of ``Sigma+ = Xi Sigma- Xi'``."""
        return float(np.abs(self.sigma_plus - self.xi @ self.sigma_minus @ self.xi.T).max())

    def pi_residual(self) -> float:
        """Relative mismatch of ``Xi' Pi+ Xi = Pi-`` using the independently solved ``Pi+``."""
        pi_plus = self.pi_plus if self.pi_plus_independent is None else self.pi_plus_independent
        return rel_frobenius(self.xi.T @ pi_plus @ self.xi, self.pi_minus)

    def jump_cost(self) -> float:
        """Value change across the jump, ``tr(Xi' Pi+ Xi Sigma-) - tr(Pi- Sigma-)``; zero at the optimum."""
        pi_plus = self.pi_plus if self.pi_plus_independent is None else self.pi_plus_independent
        return float(np.trace((self.xi.T @ pi_plus @ self.xi - self.pi_minus) @ self.sigma_minus))


@dataclass
class HybridSteeringSolution:
    segments: list[SteeringSolution]
    jumps: list[JumpRecord]
    epsilon: float
    sigma0: np.ndarray
    sigma_t: np.ndarray
    method: str = "analytic"
    extras: dict = field(default_factory=dict)

    @property
    def sigma_minus(self) -> np.ndarray:
        return self.jumps[0].sigma_minus

    @property
    def sigma_plus(self) -> np.ndarray:
        return self.jumps[0].sigma_plus

    @property
    def pi_minus(self) -> np.ndarray:
        return self.jumps[0].pi_minus

    @property
    def pi_plus(self) -> np.ndarray:
        return self.jumps[0].pi_plus

    def terminal_error(self) -> float:
        return rel_frobenius(self.segments[-1].sigma[-1], self.sigma_t)

    def initial_error(self) -> float:
        return rel_frobenius(self.segments[0].sigma[0], self.sigma0)

    def segment_costs(self) -> list[float]:
        return [s.cost() for s in self.segments]

    def cost(self) -> float:
        """Total expected cost: segment running costs plus the jump terms."""
        return float(sum(self.segment_costs()) + sum(j.jump_cost() for j in self.jumps))


def propagate_hybrid_plan(
    pi0: np.ndarray,
    h0: np.ndarray,
    segments: list[LinearSegment],
    xis: list[np.ndarray],
    sigma0: np.ndarray,
    sigma_t: np.ndarray,
    eps: float,
    *,
    hk: HybridKernel | None = None,
) -> HybridSteeringSolution:
    """Integrate Π, H, Σ segment by segment and map them through each jump.

    At a jump ``Pi+ = Xi'^{-1} Pi- Xi^{-1}``, ``H+ = Xi'^{-1} H- Xi^{-1}`` and
    ``Sigma+ = Xi Sigma- Xi'``. When ``hk`` is given, ``Pi+`` is also solved
    independently from ``Sigma+`` and the remaining kernel chain so the
    discrete Riccati condition can be checked rather than assumed.
    """
    pi, h, sigma = np.asarray(pi0, float), np.asarray(h0, float), np.asarray(sigma0, float)
    sols: list[SteeringSolution] = []
    jumps: list[JumpRecord] = []
    for idx, seg in enumerate(segments):
        pis = riccati_integrate(seg, pi, "forward")
        hs = h_integrate(seg, h, "forward")
        sig = lyapunov_propagate(sigma, pis, seg, eps)
        target = sigma_t if idx == len(segments) - 1 else np.full_like(sig[-1], np.nan)
        sols.append(SteeringSolution(seg, pis, hs, sig, feedback_gain(pis, seg), eps, sigma, target))
        if idx == len(xis):
            break
        xi = np.atleast_2d(np.asarray(xis[idx], dtype=float))
        xi_inv = np.linalg.inv(xi)
        pi = sym(xi_inv.T @ pis[-1] @ xi_inv)
        h = sym(xi_inv.T @ hs[-1] @ xi_inv)
        sigma = sym(xi @ sig[-1] @ xi.T)
        independent = None
        if hk is not None:
            rest = compose_hybrid_kernel(
                list(hk.segment_kernels[idx + 1 :]), list(hk.jump_kernels[idx + 1 :]), check=False
            )
            independent, _ = solve_smooth_cs(sigma, sigma_t, rest.composed, eps)
        jumps.append(
            JumpRecord(seg.tf, xi, sig[-1], sigma, pis[-1], pi, hs[-1], h, independent)
        )
    return HybridSteeringSolution(sols, jumps, eps, np.asarray(sigma0, float), np.asarray(sigma_t, float))


def steer_hybrid_analytic(
    segments: list[LinearSegment],
    xis: list[np.ndarray],
    sigma0: np.ndarray,
    sigma_t: np.ndarray,
    eps: float,
) -> HybridSteeringSolution:
    """Full invertible-jump pipeline: kernels, closed-form initial values, propagation."""
    hk = build_hybrid_kernel(segments, xis)
    pi0, h0 = solve_hybrid_cs(sigma0, sigma_t, hk, eps)
    sol = propagate_hybrid_plan(pi0, h0, segments, xis, sigma0, sigma_t, eps, hk=hk)
    sol.extras["hybrid_kernel"] = hk
    return sol


def kernel_path(segments: list[LinearSegment], xis: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """``Phi^H(t, t0)`` at every node of every segment, jump instants listed twice (before and after).

    Returns ``(times, kernels)``.
    """
    times, kernels = [], []
    carry = np.eye(2 * segments[0].n)
    for idx, seg in enumerate(segments):
        hist = hamiltonian_kernel(seg, keep_history=True, check=False).history
        path = hist @ carry
        times.extend(seg.times)
        kernels.extend(path)
        carry = path[-1]
        if idx < len(xis):
            carry = jump_kernel(xis[idx]).phi @ carry
            times.append(seg.tf)
            kernels.append(carry)
    return np.asarray(times), np.asarray(kernels)


def monotonicity_violation(kernels: np.ndarray, skip_initial: int = 1) -> float:
    """Largest eigenvalue of ``G(t_{k+1}) - G(t_k)`` with ``G = Phi11^{-1} Phi12``.

    A nonincreasing sequence in the PSD order gives values ``<= 0`` up to roundoff;
    the result is scaled by ``max(1, ||G||)``.
    """
    n = kernels.shape[1] // 2
    gs = [np.linalg.solve(k[:n, :n], k[:n, n:]) for k in kernels[skip_initial:]]
    worst = -np.inf
    for g0, g1 in zip(gs, gs[1:]):
        diff = sym(g1 - g0)
        worst = max(worst, float(np.linalg.eigvalsh(diff).max()) / max(1.0, np.linalg.norm(g1)))
    return worst
