"""Lasso by ADMM: the convex baseline.

Minimises ``0.5 ||A x - y||^2 + lam ||x||_1`` with the usual split
``x = z``; the x-step solves ``(A^T A + rho I) x = A^T y + rho (z - u)``
with a Cholesky factor computed once and shared by every column of ``Y``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg


@dataclass(frozen=True)
class AdmmConfig:
    lam: float = 1.0
    rho: float = 1.0
    max_iters: int = 5000
    abs_tol: float = 1e-8
    rel_tol: float = 1e-6

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not self.rho > 0:
            raise ValueError("rho must be > 0")


@dataclass
class AdmmResult:
    x: np.ndarray
    iterations: int
    converged: bool
    primal_residual: float
    dual_residual: float
    objective: list[float] = field(default_factory=list)


def soft_threshold(v, kappa):
    return np.sign(v) * np.maximum(np.abs(v) - kappa, 0.0)


def lasso_objective(A, y, x, lam) -> float:
    return float(0.5 * np.sum((A @ x - y) ** 2) + lam * np.sum(np.abs(x)))


def lasso_admm(A, y, cfg: AdmmConfig = AdmmConfig(), track_objective: bool = False) -> AdmmResult:
    """Solve the lasso for a vector ``y`` or column-by-column for a matrix ``Y``.

    Columns are iterated together and the loop stops once every column meets
    the primal and dual residual tolerances (Boyd et al. stopping rule).
    """
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite values in A or y")
    vector = y.ndim == 1
    Y = y[:, None] if vector else y
    K, N = A.shape
    rho, lam = cfg.rho, cfg.lam
    factor = linalg.cho_factor(A.T @ A + rho * np.eye(N))
    Aty = A.T @ Y
    x = np.zeros((N, Y.shape[1]))
    z = np.zeros_like(x)
    u = np.zeros_like(x)
    objective = []
    converged = False
    r_norm = s_norm = np.inf
    it = 0
    for it in range(1, cfg.max_iters + 1):
        x = linalg.cho_solve(factor, Aty + rho * (z - u))
        z_old = z
        z = soft_threshold(x + u, lam / rho)
        u = u + x - z
        r_norm = np.linalg.norm(x - z, axis=0)
        s_norm = rho * np.linalg.norm(z - z_old, axis=0)
        eps_pri = np.sqrt(N) * cfg.abs_tol + cfg.rel_tol * np.maximum(
            np.linalg.norm(x, axis=0), np.linalg.norm(z, axis=0))
        eps_dual = np.sqrt(N) * cfg.abs_tol + cfg.rel_tol * rho * np.linalg.norm(u, axis=0)
        if track_objective:
            objective.append(lasso_objective(A, Y, z, lam))
        if np.all(r_norm <= eps_pri) and np.all(s_norm <= eps_dual):
            converged = True
            break
    out = z[:, 0] if vector else z
    return AdmmResult(out, it, converged, float(np.max(r_norm)), float(np.max(s_norm)),
                      objective)


def lambda_grid(A, Y, n: int = 5, lo: float = 1e-4, hi: float = 1e-1) -> np.ndarray:
    """``n`` log-spaced penalties relative to ``lam_max = max |A^T y|``."""
    lam_max = float(np.max(np.abs(np.asarray(A).T @ np.asarray(Y))))
    return lam_max * np.logspace(np.log10(lo), np.log10(hi), n)


def select_lambda(A, Y, true_mask, cfg: AdmmConfig = AdmmConfig(), n: int = 5) -> float:
    """Penalty from :func:`lambda_grid` with the best F-measure on held-out data."""
    from .metrics import f_measure, support

    best_lam, best_f = None, -1.0
    for lam in lambda_grid(A, Y, n):
        res = lasso_admm(A, Y, AdmmConfig(lam, cfg.rho, cfg.max_iters, cfg.abs_tol, cfg.rel_tol))
        f = f_measure(true_mask, support(res.x, "magnitude")).f_measure
        if f > best_f:
            best_lam, best_f = lam, f
    return float(best_lam)
