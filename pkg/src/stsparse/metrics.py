"""Reconstruction scores: NMSE, support extraction and F-measure.

Spike convention: ``omega = 1`` is an exactly-zero component, so the
non-zero support is where the posterior spike probability is below 1/2.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .expfam import probit


@dataclass
class ScoreReport:
    nmse: float
    f_measure: float
    precision: float
    recall: float
    n_true: int
    n_est: int
    n_both: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def nmse(X_true, X_est) -> float:
    """``||X - X_est||_F^2 / ||X||_F^2``."""
    X_true = np.asarray(X_true, dtype=float)
    X_est = np.asarray(X_est, dtype=float)
    if X_true.shape != X_est.shape:
        raise ValueError(f"shape mismatch: {X_true.shape} vs {X_est.shape}")
    denom = np.sum(X_true**2)
    if denom == 0:
        raise ValueError("NMSE undefined for an all-zero true signal")
    return float(np.sum((X_true - X_est) ** 2) / denom)


def nmse_per_column(X_true, X_est) -> np.ndarray:
    X_true = np.asarray(X_true, dtype=float)
    X_est = np.asarray(X_est, dtype=float)
    return np.sum((X_true - X_est) ** 2, axis=0) / np.sum(X_true**2, axis=0)


def support(estimate, rule: str = "posterior", tau: float | None = None) -> np.ndarray:
    """Boolean mask of estimated non-zero entries.

    ``rule="posterior"``: ``estimate`` holds probit spike scores ``z`` and an
    entry is non-zero when ``Phi(z) < 0.5``.
    ``rule="magnitude"``: ``estimate`` holds signal values and an entry is
    non-zero when ``|x| > tau`` (default ``1e-3 * max|x|``).
    """
    estimate = np.asarray(estimate, dtype=float)
    if rule == "posterior":
        return probit(estimate) < 0.5
    if rule == "magnitude":
        mag = np.abs(estimate)
        if tau is None:
            tau = 1e-3 * (mag.max() if mag.size else 0.0)
        return mag > tau
    raise ValueError(f"unknown support rule {rule!r}")


def f_measure(true_mask, est_mask) -> ScoreReport:
    """Precision, recall and their harmonic mean over non-zero supports.

    Zero denominators give 0 and set ``degenerate``. The returned report has
    ``nmse`` set to NaN; :func:`score` fills it in.
    """
    true_mask = np.asarray(true_mask, dtype=bool)
    est_mask = np.asarray(est_mask, dtype=bool)
    if true_mask.shape != est_mask.shape:
        raise ValueError(f"shape mismatch: {true_mask.shape} vs {est_mask.shape}")
    n_true, n_est = int(true_mask.sum()), int(est_mask.sum())
    n_both = int((true_mask & est_mask).sum())
    degenerate = n_true == 0 or n_est == 0
    precision = n_both / n_est if n_est else 0.0
    recall = n_both / n_true if n_true else 0.0
    denom = precision + recall
    f = 2 * precision * recall / denom if denom > 0 else 0.0
    return ScoreReport(float("nan"), f, precision, recall, n_true, n_est, n_both,
                       degenerate or denom == 0)


def score(X_true, X_est, est_mask, true_mask=None) -> ScoreReport:
    X_true = np.asarray(X_true, dtype=float)
    if true_mask is None:
        true_mask = X_true != 0
    report = f_measure(true_mask, est_mask)
    report.nmse = nmse(X_true, X_est)
    return report
