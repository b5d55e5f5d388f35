"""Small dense linear-algebra helpers used across the package."""

from __future__ import annotations

import numpy as np

from .errors import HcsError


def sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def psd_sqrt(a: np.ndarray, *, kind: str = "nonpositive-sqrt-argument", tol: float = 1e-12) -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Eigenvalues slightly below zero (relative ``tol``) are clamped; anything
    more negative raises ``HcsError(kind)``.
    """
    w, v = np.linalg.eigh(sym(a))
    scale = max(1.0, float(np.max(np.abs(w))))
    if w.min() < -tol * scale:
        raise HcsError(kind, f"matrix has eigenvalue {w.min():.3e}")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def psd_inv_sqrt(a: np.ndarray, *, kind: str = "not-positive-definite") -> np.ndarray:
    w, v = np.linalg.eigh(sym(a))
    if w.min() <= 0.0:
        raise HcsError(kind, f"matrix has eigenvalue {w.min():.3e}")
    return (v / np.sqrt(w)) @ v.T


def spd_inv(a: np.ndarray, *, kind: str = "not-positive-definite") -> np.ndarray:
    try:
        c = np.linalg.cholesky(sym(a))
    except np.linalg.LinAlgError as exc:
        raise HcsError(kind, "Cholesky factorization failed") from exc
    ci = np.linalg.inv(c)
    return ci.T @ ci


def is_pd(a: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(sym(a))
    except np.linalg.LinAlgError:
        return False
    return True


def logdet_pd(a: np.ndarray) -> float:
    """log det of a symmetric positive-definite matrix; ``-inf`` if not PD."""
    try:
        c = np.linalg.cholesky(sym(a))
    except np.linalg.LinAlgError:
        return -np.inf
    return 2.0 * float(np.sum(np.log(np.diag(c))))


def solve_checked(a: np.ndarray, b: np.ndarray, kind: str, cond_limit: float = 1e12) -> np.ndarray:
    """``a^{-1} b`` that raises ``HcsError(kind)`` when ``a`` is numerically singular."""
    if not np.all(np.isfinite(a)) or np.linalg.cond(a) > cond_limit:
        raise HcsError(kind, f"condition number {np.linalg.cond(a):.3e}")
    return np.linalg.solve(a, b)


def rel_frobenius(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def blockdiag(*blocks: np.ndarray) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out
