"""Gaussian and probit-Bernoulli distributions with product/quotient rules.

Gaussians are kept in natural parameters (precision, shift = precision @ mean)
so that products and quotients are plain additions and subtractions, and so
that improper or indefinite messages stay representable.

Bernoulli distributions are parameterised by a probit score ``z`` with
success probability ``Phi(z)``. Internally the arithmetic is done on log-odds,
which is the natural parameter of the Bernoulli family, so products and
quotients never go through an intermediate clamp.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

#: Probit scores are clamped to ``[-Z_CLIP, Z_CLIP]``.
Z_CLIP = 8.0
#: Probabilities handed to ``probit_inv`` are clamped to ``[P_EPS, 1 - P_EPS]``.
P_EPS = 1e-15


class DimensionError(ValueError):
    """Raised when two Gaussian factors do not live on the same space."""


class DegenerateBernoulliError(ValueError):
    """Raised for Bernoulli arithmetic on contradictory or 0/1 factors."""


@dataclass(frozen=True)
class GaussianNat:
    """Gaussian in natural parameters.

    ``precision`` is either a scalar (1-D specialisation) or a symmetric
    ``(n, n)`` matrix; ``shift`` is a scalar or an ``(n,)`` vector. The
    precision may be zero or indefinite: that is how quotients of factors
    look. Moment form is only available for positive definite precision.
    """

    precision: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        prec = np.asarray(self.precision, dtype=float)
        shift = np.asarray(self.shift, dtype=float)
        if prec.ndim == 0:
            if shift.ndim != 0:
                raise DimensionError("scalar precision needs a scalar shift")
        elif prec.ndim == 2:
            if prec.shape[0] != prec.shape[1] or shift.shape != (prec.shape[0],):
                raise DimensionError(
                    f"precision {prec.shape} incompatible with shift {shift.shape}")
        else:
            raise DimensionError("precision must be a scalar or a square matrix")
        object.__setattr__(self, "precision", prec)
        object.__setattr__(self, "shift", shift)

    @classmethod
    def from_moments(cls, mean, cov) -> "GaussianNat":
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            prec = 1.0 / cov
            return cls(prec, prec * mean)
        prec = np.linalg.inv(cov)
        prec = 0.5 * (prec + prec.T)
        return cls(prec, prec @ mean)

    @classmethod
    def vague(cls, n: int | None = None) -> "GaussianNat":
        """Zero-precision factor; ``n=None`` gives the scalar version."""
        if n is None:
            return cls(0.0, 0.0)
        return cls(np.zeros((n, n)), np.zeros(n))

    @property
    def dim(self) -> int | None:
        return None if self.precision.ndim == 0 else self.precision.shape[0]

    @property
    def cov(self) -> np.ndarray:
        if self.precision.ndim == 0:
            if not self.precision > 0:
                raise np.linalg.LinAlgError("precision is not positive")
            return 1.0 / self.precision
        chol = np.linalg.cholesky(self.precision)
        inv_chol = np.linalg.inv(chol)
        return inv_chol.T @ inv_chol

    @property
    def mean(self) -> np.ndarray:
        if self.precision.ndim == 0:
            if not self.precision > 0:
                raise np.linalg.LinAlgError("precision is not positive")
            return self.shift / self.precision
        return np.linalg.solve(self.precision, self.shift)

    def __mul__(self, other: "GaussianNat") -> "GaussianNat":
        return gaussian_product(self, other)

    def __truediv__(self, other: "GaussianNat") -> "GaussianNat":
        return gaussian_quotient(self, other)


def _check_dims(a: GaussianNat, b: GaussianNat) -> None:
    if a.precision.shape != b.precision.shape:
        raise DimensionError(
            f"dimension mismatch: {a.precision.shape} vs {b.precision.shape}")


def gaussian_product(a: GaussianNat, b: GaussianNat) -> GaussianNat:
    _check_dims(a, b)
    return GaussianNat(a.precision + b.precision, a.shift + b.shift)


def gaussian_quotient(a: GaussianNat, b: GaussianNat) -> GaussianNat:
    """Divide ``a`` by ``b``. The result may have non-positive precision."""
    _check_dims(a, b)
    return GaussianNat(a.precision - b.precision, a.shift - b.shift)


# ---------------------------------------------------------------------------
# probit / Bernoulli
# ---------------------------------------------------------------------------

def probit(z):
    """Standard normal cdf, evaluated through ``erfc`` (accurate in the tails)."""
    return special.ndtr(z)


def log_probit(z):
    return special.log_ndtr(z)


def probit_inv(p, clip: float = Z_CLIP):
    p = np.clip(p, P_EPS, 1.0 - P_EPS)
    return np.clip(special.ndtri(p), -clip, clip)


def log_odds(z):
    """Log-odds ``log(Phi(z) / (1 - Phi(z)))`` of a probit score."""
    z = np.asarray(z, dtype=float)
    with np.errstate(invalid="ignore"):
        return special.log_ndtr(z) - special.log_ndtr(-z)


def probit_from_log_odds(lo, clip: float = Z_CLIP):
    """Inverse of :func:`log_odds`, clamped to ``[-clip, clip]``.

    The smaller of ``p`` and ``1 - p`` is formed directly (``expit(-|lo|)``)
    so no precision is lost near 0 or 1.
    """
    lo = np.asarray(lo, dtype=float)
    small = special.expit(-np.abs(lo))
    with np.errstate(divide="ignore"):
        z = np.where(lo >= 0, -special.ndtri(small), special.ndtri(small))
    z = np.where(np.isnan(lo), np.nan, z)
    out = np.clip(z, -clip, clip)
    return out if out.ndim else float(out)


def bernoulli_product(z1, z2, clip: float = Z_CLIP):
    """Probit score ``t(z1, z2)`` of ``Ber(Phi(z1)) * Ber(Phi(z2))``."""
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    if np.any(np.isinf(z1) & np.isinf(z2) & (np.sign(z1) != np.sign(z2))):
        raise DegenerateBernoulliError("product of contradictory degenerate factors")
    return probit_from_log_odds(log_odds(z1) + log_odds(z2), clip)


def bernoulli_quotient(z1, z2, clip: float = Z_CLIP):
    """Probit score ``d(z1, z2)`` of ``Ber(Phi(z1)) / Ber(Phi(z2))``."""
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    p2 = special.ndtr(z2)
    if np.any((p2 == 0.0) | (p2 == 1.0)):
        raise DegenerateBernoulliError("division by a degenerate Bernoulli factor")
    return probit_from_log_odds(log_odds(z1) - log_odds(z2), clip)
