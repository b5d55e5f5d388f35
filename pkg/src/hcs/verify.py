"""Self-checks on random instances: kernel identities, Riccati boundary conditions and the convex program.

Each suite returns :class:`CheckResult` rows (worst residual against a
tolerance). ``corrupt_phi12`` flips the sign of the upper-right kernel block
before the identity checks, a negative control that must make the kernel
suite fail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hybrid_analytic import jump_kernel, kernel_path, monotonicity_violation, steer_hybrid_analytic
from .linalg import sym
from .sdp_steering import (
    SdpProblem,
    build_prior,
    gaussian_kl,
    joint_prior_covariance,
    recover_controllers,
    solve_sdp,
)
from .smooth_steering import (
    KernelBlocks,
    LinearSegment,
    closed_loop_transition,
    hamiltonian_kernel,
    steer_smooth,
    symplectic_residuals,
)

SUITES = ("kernels", "riccati", "sdp")
IDENTITY_NAMES = (
    "Phi11'Phi22 - Phi21'Phi12 = I",
    "Phi12'Phi22 symmetric",
    "Phi21'Phi11 symmetric",
    "Phi11 Phi22' - Phi12 Phi21' = I",
    "Phi12 Phi11' symmetric",
    "Phi21 Phi22' symmetric",
)


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    max_residual: float
    tolerance: float
    instances: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_residual) and self.max_residual <= self.tolerance)

    def as_dict(self) -> dict:
        return {"suite": self.suite, "check": self.name, "max_residual": self.max_residual,
                "tolerance": self.tolerance, "instances": self.instances, "passed": self.passed}


# ------------------------------------------------------------------ random instances


def random_spd(rng: np.random.Generator, n: int, low: float = 0.2, high: float = 2.0) -> np.ndarray:
    """SPD matrix with eigenvalues drawn uniformly from ``[low, high]``."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return sym(q @ np.diag(rng.uniform(low, high, n)) @ q.T)


def random_invertible(rng: np.random.Generator, n: int, low: float = 0.5, high: float = 2.0) -> np.ndarray:
    """Square matrix with singular values in ``[low, high]``, so its condition number is bounded."""
    u, _ = np.linalg.qr(rng.standard_normal((n, n)))
    v, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return u @ np.diag(rng.uniform(low, high, n)) @ v.T


def random_segment(
    rng: np.random.Generator, n: int, *, m: int | None = None, q_scale: float = 0.0,
    t0: float = 0.0, duration: float = 1.0, steps: int = 400, time_varying: bool = False,
) -> LinearSegment:
    """Random ``(A, B, Q)`` segment; ``m`` defaults to ``n`` so ``Phi12`` is well conditioned.

    With ``time_varying`` the matrices are blended linearly between two random draws.
    """
    m = n if m is None else m
    times = np.linspace(t0, t0 + duration, steps + 1)

    def draw():
        a = 0.5 * rng.standard_normal((n, n))
        b = rng.standard_normal((n, m))
        q = q_scale * random_spd(rng, n, 0.0, 1.0) if q_scale > 0 else np.zeros((n, n))
        return a, b, q

    start = draw()
    end = draw() if time_varying else start
    w = ((times - t0) / duration)[:, None, None]
    a, b, q = ((1 - w) * s + w * e for s, e in zip(start, end))
    return LinearSegment(times, a, b, q)


def random_hybrid(
    rng: np.random.Generator, n: int, jumps: int, *, q_scale: float = 0.0, steps: int = 300
) -> tuple[list[LinearSegment], list[np.ndarray]]:
    """``jumps + 1`` unit-length segments of size ``n`` joined by well-conditioned invertible jumps."""
    segs = [random_segment(rng, n, q_scale=q_scale, t0=float(j), steps=steps) for j in range(jumps + 1)]
    return segs, [random_invertible(rng, n) for _ in range(jumps)]


def _flip12(phi: np.ndarray) -> np.ndarray:
    out = phi.copy()
    n = phi.shape[0] // 2
    out[:n, n:] *= -1.0
    return out


# ------------------------------------------------------------------ suites


def kernels_suite(rng: np.random.Generator, count: int = 100, *, corrupt_phi12: bool = False) -> list[CheckResult]:
    """Six identities on smooth kernels, their preservation under products and jumps, and PSD monotonicity."""
    tamper = _flip12 if corrupt_phi12 else (lambda p: p)
    smooth = np.zeros(6)
    product = jump = 0.0
    for _ in range(count):
        n = int(rng.integers(1, 5))
        k1 = hamiltonian_kernel(random_segment(rng, n, q_scale=1.0, time_varying=True, steps=200), check=False)
        k2 = hamiltonian_kernel(random_segment(rng, n, q_scale=1.0, t0=1.0, steps=200), check=False)
        smooth = np.maximum(smooth, symplectic_residuals(tamper(k1.phi)))
        product = max(product, symplectic_residuals(tamper(k2.compose(k1).phi)).max())
        jk = jump_kernel(random_invertible(rng, n))
        chained = KernelBlocks(k2.phi @ jk.phi @ k1.phi, 0.0, 2.0)
        jump = max(jump, symplectic_residuals(tamper(jk.phi)).max(), symplectic_residuals(tamper(chained.phi)).max())
    rows = [CheckResult("kernels", f"identity {i + 1}: {IDENTITY_NAMES[i]}", float(r), 1e-8, count)
            for i, r in enumerate(smooth)]
    rows.append(CheckResult("kernels", "identities preserved under products", float(product), 1e-8, count))
    rows.append(CheckResult("kernels", "identities preserved through jump kernels", float(jump), 1e-8, count))
    mono = -np.inf
    mono_count = max(1, count // 10)
    for _ in range(mono_count):
        n = int(rng.integers(1, 4))
        segs, xis = random_hybrid(rng, n, int(rng.integers(1, 4)), steps=100)
        _, kernels = kernel_path(segs, xis)
        if corrupt_phi12:
            kernels = np.array([_flip12(k) for k in kernels])
        mono = max(mono, monotonicity_violation(kernels))
    rows.append(CheckResult("kernels", "Phi11^-1 Phi12 nonincreasing across jumps", max(float(mono), 0.0), 1e-8,
                            mono_count))
    return rows


def riccati_suite(rng: np.random.Generator, smooth_count: int = 50, hybrid_count: int = 20) -> list[CheckResult]:
    """Terminal steering exactness, the ``eps Sigma^-1 = Pi + H`` coupling and the jump conditions."""
    term_s = term_h = coupling = sig_jump = pi_jump = 0.0
    for _ in range(smooth_count):
        n = int(rng.integers(1, 5))
        seg = random_segment(rng, n, q_scale=float(rng.uniform(0, 1)), time_varying=True)
        sol = steer_smooth(seg, random_spd(rng, n), random_spd(rng, n), float(rng.uniform(0.1, 1.0)))
        term_s = max(term_s, sol.terminal_error())
        coupling = max(coupling, float(np.nanmax(sol.coupling_residuals())))
    for _ in range(hybrid_count):
        n = int(rng.integers(1, 5))
        segs, xis = random_hybrid(rng, n, int(rng.integers(1, 3)), q_scale=float(rng.uniform(0, 1)), steps=1000)
        sol = steer_hybrid_analytic(segs, xis, random_spd(rng, n), random_spd(rng, n), float(rng.uniform(0.1, 1.0)))
        term_h = max(term_h, sol.terminal_error())
        sig_jump = max(sig_jump, *(j.sigma_residual() for j in sol.jumps))
        pi_jump = max(pi_jump, *(j.pi_residual() for j in sol.jumps))
    return [
        CheckResult("riccati", "smooth terminal covariance reached", term_s, 1e-6, smooth_count),
        CheckResult("riccati", "hybrid terminal covariance reached", term_h, 1e-6, hybrid_count),
        CheckResult("riccati", "eps Sigma^-1 = Pi + H along the solution", coupling, 1e-6, smooth_count),
        CheckResult("riccati", "Sigma+ = Xi Sigma- Xi'", sig_jump, 1e-8, hybrid_count),
        CheckResult("riccati", "Xi' Pi+ Xi = Pi-", pi_jump, 1e-6, hybrid_count),
    ]


def singular_jump_instance(eps: float = 0.5) -> SdpProblem:
    """One state before the jump, two after, ``Xi = [1; 1]``."""
    pre = LinearSegment.constant([[0.0]], [[1.0]], steps=300)
    post = LinearSegment.constant([[0.0, 1.0], [0.0, 0.0]], np.eye(2), t0=1.0, tf=2.0, steps=300)
    return SdpProblem.from_segments([pre, post], [np.array([[1.0], [1.0]])], np.array([[0.5]]),
                                    np.diag([0.3, 0.2]), eps)


def girsanov_gap(segment: LinearSegment, sigma0: np.ndarray, sigma_t: np.ndarray, eps: float) -> float:
    """Relative gap between ``E int ||u||^2 / (2 eps)`` and the endpoint relative entropy (``Q = 0``)."""
    sol = steer_smooth(segment, sigma0, sigma_t, eps)
    energy_kl = sol.control_energy() / (2.0 * eps)
    phi_cl = closed_loop_transition(sol.pi, segment)[-1]
    s0 = np.asarray(sigma0, float)
    joint = np.block([[s0, s0 @ phi_cl.T], [phi_cl @ s0, sol.sigma[-1]]])
    prior = joint_prior_covariance(build_prior(segment), s0, eps)
    kl = gaussian_kl(sym(joint), sym(prior))
    return abs(energy_kl - kl) / max(abs(kl), 1e-300)


def sdp_suite(rng: np.random.Generator, count: int = 10) -> list[CheckResult]:
    """Convex program against the closed form, the singular-jump instance and the energy/entropy identity."""
    agree = term = 0.0
    for _ in range(count):
        n = int(rng.integers(1, 4))
        segs, xis = random_hybrid(rng, n, int(rng.integers(1, 3)), steps=500)
        s0, st, eps = random_spd(rng, n), random_spd(rng, n), float(rng.uniform(0.2, 1.0))
        analytic = steer_hybrid_analytic(segs, xis, s0, st, eps)
        problem = SdpProblem.from_segments(segs, xis, s0, st, eps)
        sol = solve_sdp(problem)
        for ja, sm in zip(analytic.jumps, sol.sigma_minus_list):
            agree = max(agree, float(np.abs(ja.sigma_minus - sm).max()))
        term = max(term, recover_controllers(sol, problem).terminal_error())
    problem = singular_jump_instance()
    sol = solve_sdp(problem)
    hyb = recover_controllers(sol, problem)
    w = np.linalg.eigvalsh(sol.sigma_plus)
    ratio = max(w.min(), 0.0) / w.max()
    hist = {h["eta"]: h["sigma_minus"][0] for h in sol.eta_history}
    eta_gap = float(np.abs(hist[1e-4] - hist[1e-6]).max()) if {1e-4, 1e-6} <= hist.keys() else float("nan")
    kl = 0.0
    for _ in range(count):
        n = int(rng.integers(1, 4))
        seg = random_segment(rng, n, time_varying=True)
        kl = max(kl, girsanov_gap(seg, random_spd(rng, n), random_spd(rng, n), float(rng.uniform(0.2, 1.0))))
    return [
        CheckResult("sdp", "pre-jump covariance matches the closed form", agree, 1e-5, count),
        CheckResult("sdp", "recovered controllers reach the terminal covariance", term, 1e-6, count),
        CheckResult("sdp", "singular jump: lambda_min/lambda_max of Sigma+", float(ratio), 1e-8, 1),
        CheckResult("sdp", "singular jump: terminal covariance reached", hyb.terminal_error(), 1e-6, 1),
        CheckResult("sdp", "singular jump: eta 1e-4 vs 1e-6 gap", eta_gap, 1e-4, 1),
        CheckResult("sdp", "control energy / 2 eps equals endpoint KL", kl, 1e-4, count),
    ]


def run_suites(names: list[str] | tuple[str, ...] = SUITES, *, seed: int = 0, corrupt_phi12: bool = False,
               scale: float = 1.0) -> list[CheckResult]:
    """Run the named suites with a fixed seed; ``scale`` shrinks or grows the instance counts."""
    rng = np.random.default_rng(seed)
    rows: list[CheckResult] = []
    for name in names:
        if name == "kernels":
            rows += kernels_suite(rng, max(1, int(100 * scale)), corrupt_phi12=corrupt_phi12)
        elif name == "riccati":
            rows += riccati_suite(rng, max(1, int(50 * scale)), max(1, int(20 * scale)))
        elif name == "sdp":
            rows += sdp_suite(rng, max(1, int(10 * scale)))
        else:
            raise ValueError(f"unknown suite {name!r}")
    return rows


def format_table(rows: list[CheckResult]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'suite':8s} {'check':{width}s} {'max residual':>12s} {'tol':>8s}  result"]
    for r in rows:
        lines.append(f"{r.suite:8s} {r.name:{width}s} {r.max_residual:12.3e} {r.tolerance:8.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
