"""Covariance steering through general (rectangular or singular) jumps.

The problem is posed on Gaussian path measures. Each smooth segment has a
prior: the LQG closed loop ``A_hat = A - B B' Pi_hat`` driven by noise. The
cost is the sum over segments of the relative entropy between the controlled
start/end joint Gaussian and the prior's. Only end-point covariances and
start/end cross-covariances enter, so the problem is small and convex:

    minimize  sum_j (1/eps) [tr(S^-1 E) + tr(Phi' S^-1 Phi P) - 2 tr(Phi' S^-1 W)]
              - logdet(E - W P^-1 W')

with ``P`` the segment's start covariance, ``E`` its end covariance and ``W``
the end/start cross-covariance. ``P`` after a jump is ``Xi Sigma- Xi'``
(plus ``eta c I`` when that matrix is singular, with ``c`` the larger spectral
norm of the boundary covariances), substituted directly.

The variables are the pre-jump covariances ``Sigma-_i`` and all ``W_j``. They
are found with a damped Newton method that uses an exact Hessian, assembled
segment by segment so the cost grows linearly with the number of jumps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import HcsError
from .hybrid_analytic import HybridSteeringSolution, JumpRecord
from .linalg import is_pd, logdet_pd, rel_frobenius, spd_inv, sym
from .smooth_steering import (
    LinearSegment,
    SteeringSolution,
    _pi_stage,
    feedback_gain,
    h_integrate,
    hamiltonian_kernel,
    integrate_rk4,
    lyapunov_propagate,
    propagate_from,
    riccati_integrate,
    solve_smooth_cs,
    terminal_pi,
)

log = logging.getLogger(__name__)

DEFAULT_ETAS = (1e-2, 1e-4, 1e-6)
ROUNDOFF_DECREMENT = 100.0 * np.finfo(float).eps


@dataclass(frozen=True)
class PriorSegment:
    segment: LinearSegment
    pi_hat: np.ndarray
    a_hat: np.ndarray
    phi: np.ndarray
    gramian: np.ndarray

    @property
    def n(self) -> int:
        return self.segment.n


def build_prior(segment: LinearSegment, *, check: bool = True) -> PriorSegment:
    """LQG prior on one segment: ``Pi_hat`` from ``Pi_hat(tf) = 0``, then ``Phi_Ahat`` and the Gramian.

    ``Phi`` and ``S`` are integrated together, ``dPhi = A_hat Phi`` and
    ``dS = A_hat S + S A_hat' + B B'`` from ``S(t0) = 0``, which yields
    ``S = int Phi(tf, tau) B B' Phi(tf, tau)' dtau``.
    """
    n = segment.n
    pis = riccati_integrate(segment, np.zeros((n, n)), "backward")
    a_hat = segment.a - np.einsum("kij,klj,klm->kim", segment.b, segment.b, pis)

    def rhs(i, j, c, x):
        a, b, _ = segment.at(i, j, c)
        ah = a - b @ (b.T @ _pi_stage(segment, pis, i, j, c))
        phi, s = x[:n], x[n:]
        as_ = ah @ s
        return np.concatenate([ah @ phi, as_ + as_.T + b @ b.T])

    x0 = np.concatenate([np.eye(n), np.zeros((n, n))])
    end = integrate_rk4(segment.times, x0, rhs)[-1]
    phi, s = end[:n], sym(end[n:])
    if check:
        w = np.linalg.eigvalsh(s)
        if w.min() <= 1e-12 * max(w.max(), 0.0):
            raise HcsError("gramian-singular", f"Gramian eigenvalues span [{w.min():.3e}, {w.max():.3e}]")
    return PriorSegment(segment, pis, a_hat, phi, s)


def joint_prior_covariance(prior: PriorSegment, sigma_start: np.ndarray, eps: float) -> np.ndarray:
    """Prior joint covariance of ``(X_start, X_end)`` given the start covariance."""
    p = np.asarray(sigma_start, dtype=float)
    phi = prior.phi
    return np.block([[p, p @ phi.T], [phi @ p, phi @ p @ phi.T + eps * prior.gramian]])


def gaussian_kl(cov_p: np.ndarray, cov_q: np.ndarray) -> float:
    """``KL(N(0, cov_p) || N(0, cov_q))``."""
    n = cov_p.shape[0]
    lp, lq = logdet_pd(cov_p), logdet_pd(cov_q)
    if not (np.isfinite(lp) and np.isfinite(lq)):
        raise HcsError("infeasible-logdet-domain", "joint covariance is not positive definite")
    return 0.5 * (lq - lp + float(np.trace(np.linalg.solve(cov_q, cov_p))) - n)


# ------------------------------------------------------------------- problem


@dataclass(frozen=True)
class SdpProblem:
    """A chain of ``J + 1`` prior segments joined by ``J`` jumps ``Xi_i`` (``n_{i+1} x n_i``)."""

    priors: tuple[PriorSegment, ...]
    xis: tuple[np.ndarray, ...]
    sigma0: np.ndarray
    sigma_t: np.ndarray
    epsilon: float
    eta_schedule: tuple[float, ...] = DEFAULT_ETAS
    tol: float = 1e-9
    max_iter: int = 200

    def __post_init__(self):
        if len(self.priors) != len(self.xis) + 1:
            raise HcsError("dimension-mismatch", "need one more segment than jumps")
        for i, xi in enumerate(self.xis):
            if xi.shape != (self.priors[i + 1].n, self.priors[i].n):
                raise HcsError("dimension-mismatch", f"jump {i} is {xi.shape}, segments are "
                               f"{self.priors[i].n}->{self.priors[i + 1].n}")
        if self.sigma0.shape != (self.priors[0].n,) * 2 or self.sigma_t.shape != (self.priors[-1].n,) * 2:
            raise HcsError("dimension-mismatch", "boundary covariances do not match segment sizes")
        if not is_pd(self.sigma0) or not is_pd(self.sigma_t):
            raise HcsError("not-positive-definite", "boundary covariances must be positive definite")

    @classmethod
    def from_segments(cls, segments, xis, sigma0, sigma_t, eps, **kw) -> "SdpProblem":
        priors = tuple(build_prior(s) for s in segments)
        xis = tuple(np.atleast_2d(np.asarray(x, dtype=float)) for x in xis)
        return cls(priors, xis, sym(np.asarray(sigma0, float)), sym(np.asarray(sigma_t, float)), float(eps), **kw)

    @property
    def jumps(self) -> int:
        return len(self.xis)

    @property
    def eta_scale(self) -> float:
        """Covariance scale that makes ``eta`` a relative regularization."""
        return float(max(np.linalg.norm(self.sigma0, 2), np.linalg.norm(self.sigma_t, 2)))

    @property
    def rank_deficient(self) -> list[bool]:
        """Per jump: whether ``Xi Sigma- Xi'`` is necessarily singular."""
        return [np.linalg.matrix_rank(x) < x.shape[0] for x in self.xis]

    # Two-segment aliases for the common single-jump case.
    @property
    def s1(self):
        return self.priors[0].gramian

    @property
    def s2(self):
        return self.priors[1].gramian

    @property
    def phi1(self):
        return self.priors[0].phi

    @property
    def phi2(self):
        return self.priors[1].phi

    @property
    def xi(self):
        return self.xis[0]

    def kl_constant(self) -> float:
        """``sum_j [logdet(eps S_j) - n_j]``: objective plus this equals twice the total KL."""
        return float(sum(logdet_pd(self.epsilon * p.gramian) - p.n for p in self.priors))


@dataclass
class SdpSolution:
    sigma_minus_list: list[np.ndarray]
    sigma_plus_list: list[np.ndarray]
    w_list: list[np.ndarray]
    objective: float
    kkt_residual: float
    iterations: int
    eta: float
    y_slacks: list[np.ndarray]
    y1: np.ndarray
    y2: np.ndarray
    eta_history: list[dict] = field(default_factory=list)

    @property
    def sigma_minus(self) -> np.ndarray:
        return self.sigma_minus_list[0]

    @property
    def sigma_plus(self) -> np.ndarray:
        return self.sigma_plus_list[0]

    @property
    def w1(self) -> np.ndarray:
        return self.w_list[0]

    @property
    def w2(self) -> np.ndarray:
        return self.w_list[-1]


# ----------------------------------------------------------- variable layout


def _sym_basis(n: int) -> np.ndarray:
    """Basis of symmetric ``n x n`` matrices matching upper-triangular coordinates."""
    iu, ju = np.triu_indices(n)
    basis = np.zeros((iu.size, n, n))
    basis[np.arange(iu.size), iu, ju] = 1.0
    basis[np.arange(iu.size), ju, iu] = 1.0
    return basis


class _Layout:
    """Packs ``(Sigma-_1..J, W_1..J+1)`` into one coordinate vector and precomputes directions."""

    def __init__(self, problem: SdpProblem):
        self.problem = problem
        dims = [p.n for p in problem.priors]
        self.dims = dims
        offset = 0
        self.sig_slices, self.w_slices = [], []
        for i in range(problem.jumps):
            k = dims[i] * (dims[i] + 1) // 2
            self.sig_slices.append(slice(offset, offset + k))
            offset += k
        for n in dims:
            self.w_slices.append(slice(offset, offset + n * n))
            offset += n * n
        self.size = offset
        self.bases = [_sym_basis(dims[i]) for i in range(problem.jumps)]
        self.local = [self._segment_directions(j) for j in range(len(dims))]

    def _segment_directions(self, j: int):
        p = self.problem
        n = self.dims[j]
        idx, d_e, d_p, d_w = [], [], [], []
        if j < p.jumps:
            basis = self.bases[j]
            s = self.sig_slices[j]
            idx.extend(range(s.start, s.stop))
            d_e.append(basis)
            d_p.append(np.zeros((len(basis), n, n)))
            d_w.append(np.zeros((len(basis), n, n)))
        if j > 0:
            basis = self.bases[j - 1]
            xi = p.xis[j - 1]
            s = self.sig_slices[j - 1]
            idx.extend(range(s.start, s.stop))
            d_e.append(np.zeros((len(basis), n, n)))
            d_p.append(np.einsum("ij,ajk,lk->ail", xi, basis, xi))
            d_w.append(np.zeros((len(basis), n, n)))
        s = self.w_slices[j]
        idx.extend(range(s.start, s.stop))
        unit = np.eye(n * n).reshape(n * n, n, n)
        d_e.append(np.zeros((n * n, n, n)))
        d_p.append(np.zeros((n * n, n, n)))
        d_w.append(unit)
        d_e, d_p, d_w = np.concatenate(d_e), np.concatenate(d_p), np.concatenate(d_w)
        prior = p.priors[j]
        s_inv = spd_inv(prior.gramian)
        g_phi = prior.phi.T @ s_inv
        lin = (
            np.einsum("ij,aji->a", s_inv, d_e)
            + np.einsum("ij,aji->a", g_phi @ prior.phi, d_p)
            - 2.0 * np.einsum("ij,aji->a", g_phi, d_w)
        ) / p.epsilon
        if j > 0:
            lin = lin + np.einsum("ij,aji->a", prior.pi_hat[0], d_p) / p.epsilon
        return np.asarray(idx), d_e, d_p, d_w, lin, s_inv, g_phi

    def unpack(self, x: np.ndarray):
        sig = []
        for i, s in enumerate(self.sig_slices):
            n = self.dims[i]
            m = np.zeros((n, n))
            iu, ju = np.triu_indices(n)
            m[iu, ju] = x[s]
            m[ju, iu] = x[s]
            sig.append(m)
        ws = [x[s].reshape(self.dims[j], self.dims[j]) for j, s in enumerate(self.w_slices)]
        return sig, ws

    def pack(self, sig: list[np.ndarray], ws: list[np.ndarray]) -> np.ndarray:
        x = np.empty(self.size)
        for i, s in enumerate(self.sig_slices):
            iu, ju = np.triu_indices(self.dims[i])
            x[s] = sig[i][iu, ju]
        for j, s in enumerate(self.w_slices):
            x[s] = ws[j].ravel()
        return x


def _start_end(problem: SdpProblem, sig: list[np.ndarray], etas: list[float]):
    """Start covariance ``P_j`` and end covariance ``E_j`` of every segment."""
    starts = [problem.sigma0]
    for i, xi in enumerate(problem.xis):
        starts.append(sym(xi @ sig[i] @ xi.T) + etas[i] * np.eye(xi.shape[0]))
    ends = list(sig) + [problem.sigma_t]
    return starts, ends


def _segment_terms(prior: PriorSegment, p: np.ndarray, e: np.ndarray, w: np.ndarray, eps: float,
                   start_is_variable: bool = False):
    """Objective contribution of one segment, or ``None`` outside the log-det domain.

    When the start covariance is a decision variable the prior's value at the
    segment start, ``tr(Pi_hat(t0) P) / eps``, is added: it links the relative
    entropy to the quadratic cost and vanishes for ``Q = 0``.
    """
    try:
        cp = np.linalg.cholesky(p)
    except np.linalg.LinAlgError:
        return None
    k = np.linalg.solve(cp.T, np.linalg.solve(cp, w.T)).T  # W P^-1
    y = sym(e - k @ w.T)
    ld = logdet_pd(y)
    if not np.isfinite(ld):
        return None
    s_inv = spd_inv(prior.gramian)
    phi = prior.phi
    lin = np.trace(s_inv @ e) + np.trace(phi.T @ s_inv @ phi @ p) - 2.0 * np.trace(phi.T @ s_inv @ w)
    if start_is_variable:
        lin += np.trace(prior.pi_hat[0] @ p)
    return lin / eps - ld, y, k


def _etas_for(problem: SdpProblem, eta: float) -> list[float]:
    scaled = eta * problem.eta_scale
    return [scaled if deficient else 0.0 for deficient in problem.rank_deficient]


def objective_eval(
    sigma_minus: list[np.ndarray] | np.ndarray,
    w: list[np.ndarray],
    problem: SdpProblem,
    eta: float = 0.0,
) -> float:
    """Convex objective at a candidate; ``eta`` regularizes singular post-jump covariances.

    For ``Q = 0`` the value plus ``problem.kl_constant()`` equals twice the
    summed relative entropy between the candidate's segment joints and the
    priors. With state cost, each post-jump segment adds ``tr(Pi_hat(t0) P) / eps``.
    """
    sig = [sigma_minus] if isinstance(sigma_minus, np.ndarray) else list(sigma_minus)
    starts, ends = _start_end(problem, [sym(s) for s in sig], _etas_for(problem, eta))
    total = 0.0
    for j, prior in enumerate(problem.priors):
        terms = _segment_terms(prior, starts[j], ends[j], np.asarray(w[j], float), problem.epsilon, j > 0)
        if terms is None:
            raise HcsError("infeasible-logdet-domain", f"segment {j} leaves the log-det domain")
        total += terms[0]
    return float(total)


def segment_kl(prior: PriorSegment, p: np.ndarray, e: np.ndarray, w: np.ndarray, eps: float) -> float:
    """Relative entropy of the candidate joint ``[[P, W'], [W, E]]`` against the prior joint."""
    joint = np.block([[p, w.T], [w, e]])
    return gaussian_kl(joint, joint_prior_covariance(prior, p, eps))


# -------------------------------------------------------------------- Newton


class _Objective:
    def __init__(self, problem: SdpProblem, layout: _Layout, eta: float):
        self.p = problem
        self.layout = layout
        self.etas = _etas_for(problem, eta)

    def value(self, x: np.ndarray) -> float:
        sig, ws = self.layout.unpack(x)
        starts, ends = _start_end(self.p, sig, self.etas)
        total = 0.0
        for j, prior in enumerate(self.p.priors):
            terms = _segment_terms(prior, starts[j], ends[j], ws[j], self.p.epsilon, j > 0)
            if terms is None:
                return np.inf
            total += terms[0]
        return float(total)

    def derivatives(self, x: np.ndarray):
        sig, ws = self.layout.unpack(x)
        starts, ends = _start_end(self.p, sig, self.etas)
        size = self.layout.size
        grad = np.zeros(size)
        hess = np.zeros((size, size))
        total = 0.0
        for j, prior in enumerate(self.p.priors):
            terms = _segment_terms(prior, starts[j], ends[j], ws[j], self.p.epsilon, j > 0)
            if terms is None:
                raise HcsError("infeasible-logdet-domain", f"segment {j} left the domain")
            f, y, k = terms
            total += f
            idx, d_e, d_p, d_w, lin, _, _ = self.layout.local[j]
            y_inv = spd_inv(y)
            p_inv = spd_inv(starts[j])
            kt = k.T
            kdw = np.einsum("ij,ajk->aik", k, np.swapaxes(d_w, 1, 2))
            d_y = d_e - np.swapaxes(kdw, 1, 2) - kdw + np.einsum("ij,ajk,kl->ail", k, d_p, kt)
            a = np.einsum("ij,ajk->aik", y_inv, d_y)
            grad[idx] += lin - np.einsum("aii->a", a)
            v = d_w - np.einsum("ij,ajk->aik", k, d_p)
            yv = np.einsum("ij,ajk->aik", y_inv, v)
            vp = np.einsum("aij,jk->aik", v, p_inv)
            local = np.einsum("aij,bji->ab", a, a) + 2.0 * np.einsum("aik,bik->ab", yv, vp)
            hess[np.ix_(idx, idx)] += local
        return total, grad, sym(hess)


def _newton(obj: _Objective, x0: np.ndarray, tol: float, max_iter: int):
    """Damped Newton with backtracking.

    Returns ``(x, f, residual, iterations)`` where ``residual`` is the Newton
    decrement ``sqrt(g' H^{-1} g)``, an optimality measure that does not depend
    on how the covariance entries are scaled.
    """
    x = x0.copy()
    f, g, h = obj.derivatives(x)
    for it in range(1, max_iter + 1):
        reg = 0.0
        while True:
            try:
                c = np.linalg.cholesky(h + reg * np.eye(len(x)))
                break
            except np.linalg.LinAlgError:
                reg = max(1e-12 * np.abs(np.diag(h)).max(), 10.0 * reg)
        step = -np.linalg.solve(c.T, np.linalg.solve(c, g))
        decrement = max(float(-g @ step), 0.0)
        residual = float(np.sqrt(decrement))
        # The decrement cannot drop below roundoff in f, about a few machine epsilons of |f|.
        if residual <= tol * (1.0 + abs(f)) ** 0.5 or decrement <= ROUNDOFF_DECREMENT * (1.0 + abs(f)):
            return x, f, residual, it - 1
        t = 1.0
        while True:
            f_new = obj.value(x + t * step)
            if f_new <= f - 0.25 * t * decrement:
                break
            t *= 0.5
            if t < 1e-14:
                return x, f, residual, it
        if f - f_new <= 4.0 * np.finfo(float).eps * abs(f):
            # The step no longer changes f measurably: converged to working precision.
            return x + t * step, f_new, residual, it
        x = x + t * step
        f, g, h = obj.derivatives(x)
    raise HcsError("max-iterations", f"Newton stopped after {max_iter} iterations")


def _initial_point(problem: SdpProblem, layout: _Layout, etas: list[float], rho: float = 0.0) -> np.ndarray:
    """Prior end covariances ``Sigma- = Phi P Phi' + eps S`` with cross-covariances ``W = rho Phi P``.

    The default ``rho = 0`` (uncorrelated end points) is strictly feasible and
    keeps the start away from the log-det boundary, where damped Newton steps
    are short.
    """
    sig, ws = [], []
    p = problem.sigma0
    for j, prior in enumerate(problem.priors):
        phi_p = prior.phi @ p
        if j < problem.jumps:
            e = sym(phi_p @ prior.phi.T + problem.epsilon * prior.gramian)
            sig.append(e)
            ws.append(rho * phi_p)
            xi = problem.xis[j]
            p = sym(xi @ e @ xi.T) + etas[j] * np.eye(xi.shape[0])
        else:
            r = rho
            base = sym(phi_p @ prior.phi.T)
            while not is_pd(problem.sigma_t - r * r * base):
                r *= 0.5
                if r < 1e-12:
                    r = 0.0
                    break
            ws.append(r * phi_p)
    return layout.pack(sig, ws)


def _shrink_to_feasible(obj: _Objective, x: np.ndarray) -> np.ndarray:
    """Scale the cross-covariances down until every log-det term is finite again."""
    sig, ws = obj.layout.unpack(x)
    factor = 1.0
    for _ in range(200):
        cand = obj.layout.pack(sig, [factor * w for w in ws])
        if np.isfinite(obj.value(cand)):
            return cand
        factor *= 0.9
    raise HcsError("infeasible", "could not restore a strictly feasible point")


def solve_sdp(problem: SdpProblem, *, x0: np.ndarray | None = None) -> SdpSolution:
    """Minimize the convex objective over pre-jump covariances and cross-covariances.

    Rank-deficient jumps are solved along the eta schedule with warm starts,
    then the pre-jump covariances and cross-covariances are extrapolated
    linearly to ``eta -> 0`` from the last two schedule values.
    """
    layout = _Layout(problem)
    deficient = any(problem.rank_deficient)
    etas = list(problem.eta_schedule) if deficient else [0.0]
    history = []
    x = x0
    for eta in etas:
        obj = _Objective(problem, layout, eta)
        if x is None:
            x = _initial_point(problem, layout, obj.etas)
            if not np.isfinite(obj.value(x)):
                x = _shrink_to_feasible(obj, x)
        elif not np.isfinite(obj.value(x)):
            x = _shrink_to_feasible(obj, x)
        x, f, resid, iters = _newton(obj, x, problem.tol, problem.max_iter)
        log.debug("eta=%g objective=%.12g decrement=%.2e iterations=%d", eta, f, resid, iters)
        history.append({"eta": eta, "x": x.copy(), "objective": f, "kkt_residual": resid, "iterations": iters})

    last = history[-1]
    x_final = last["x"]
    if deficient and len(history) >= 2:
        e1, e2 = history[-2]["eta"], history[-1]["eta"]
        x1, x2 = history[-2]["x"], history[-1]["x"]
        x_final = x2 + (x2 - x1) * (e2 / (e1 - e2))
        obj = _Objective(problem, layout, e2)
        if not np.isfinite(obj.value(x_final)) or not all(is_pd(s) for s in layout.unpack(x_final)[0]):
            x_final = x2
    sig, ws = layout.unpack(x_final)
    sig = [sym(s) for s in sig]
    sig_plus = [sym(xi @ s @ xi.T) for xi, s in zip(problem.xis, sig)]
    eta_used = last["eta"]
    starts, ends = _start_end(problem, sig, _etas_for(problem, eta_used))
    slacks = []
    for j in range(len(problem.priors)):
        k = np.linalg.solve(starts[j], ws[j].T).T
        slacks.append(sym(ends[j] - k @ ws[j].T))
    y1 = np.block([[problem.sigma0, ws[0].T], [ws[0], ends[0]]])
    public_hist = []
    for h in history:
        s_h, w_h = layout.unpack(h["x"])
        public_hist.append({k: v for k, v in h.items() if k != "x"} | {"sigma_minus": s_h, "w": w_h})
    return SdpSolution(
        sigma_minus_list=sig,
        sigma_plus_list=sig_plus,
        w_list=ws,
        objective=float(last["objective"]),
        kkt_residual=float(last["kkt_residual"]),
        iterations=int(sum(h["iterations"] for h in history)),
        eta=eta_used,
        y_slacks=slacks,
        y1=y1,
        y2=slacks[-1],
        eta_history=public_hist,
    )


# -------------------------------------------------------------- controllers


def recover_controllers(sol: SdpSolution, problem: SdpProblem) -> HybridSteeringSolution:
    """Per-segment optimal feedback from the optimal boundary covariances.

    The first segment uses the forward closed form. Later segments may start
    from a singular covariance, so their Riccati solutions are seeded from the
    terminal closed form and integrated backward.
    """
    eps = problem.epsilon
    sols: list[SteeringSolution] = []
    jumps: list[JumpRecord] = []
    ends = list(sol.sigma_minus_list) + [problem.sigma_t]
    start = problem.sigma0
    for j, prior in enumerate(problem.priors):
        seg = prior.segment
        kernel = hamiltonian_kernel(seg)
        if j == 0:
            pi0, h0 = solve_smooth_cs(start, ends[j], kernel, eps)
            s = propagate_from(seg, pi0, h0, start, eps, ends[j])
        else:
            pi_t = terminal_pi(start, ends[j], kernel, eps)
            pis = riccati_integrate(seg, pi_t, "backward")
            if np.linalg.cond(start) < 1e12:
                hs = h_integrate(seg, eps * np.linalg.inv(start) - pis[0], "forward")
            else:
                hs = np.full_like(pis, np.nan)
            sig = lyapunov_propagate(start, pis, seg, eps)
            s = SteeringSolution(seg, pis, hs, sig, feedback_gain(pis, seg), eps, start, ends[j])
        sols.append(s)
        if j < problem.jumps:
            start = sol.sigma_plus_list[j]
    for i, xi in enumerate(problem.xis):
        before, after = sols[i], sols[i + 1]
        jumps.append(
            JumpRecord(before.times[-1], xi, before.sigma[-1], after.sigma[0], before.pi[-1], after.pi[0],
                       before.h[-1], after.h[0])
        )
    out = HybridSteeringSolution(sols, jumps, eps, problem.sigma0, problem.sigma_t, method="sdp")
    out.extras["sdp"] = sol
    return out


def steer_hybrid_sdp(segments, xis, sigma0, sigma_t, eps, **kw) -> HybridSteeringSolution:
    problem = SdpProblem.from_segments(segments, xis, sigma0, sigma_t, eps, **kw)
    return recover_controllers(solve_sdp(problem), problem)


def jump_pi_residual(jump: JumpRecord) -> float:
    """Relative mismatch of the discrete Riccati jump condition; reported, not enforced."""
    return rel_frobenius(jump.xi.T @ jump.pi_plus @ jump.xi, jump.pi_minus)
