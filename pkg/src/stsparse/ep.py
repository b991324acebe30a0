"""Batch expectation propagation for the two-level GP spike-and-slab model.

Variables per timestamp ``t``: signal ``x_t``, spike indicators ``omega_t``,
spatial GP ``gamma_t`` and its mean ``mu_t``. Approximating factors:

* ``g_t`` -- likelihood, fixed: precision ``A^T A / sigma2``, shift ``A^T y_t / sigma2``.
* ``f_t`` -- spike-and-slab factor: diagonal Gaussian on ``x_t`` and a probit
  score per component.
* ``h_t`` -- probit link: diagonal Gaussian on ``gamma_t`` and a probit score.
* ``r_t`` -- ``N(gamma_t; mu_t, Sigma_0)``: one Gaussian message to ``gamma_t``
  and one to ``mu_t``.
* ``u_t`` (t >= 1) -- ``N(mu_t; mu_{t-1}, W)``: a message to ``mu_t`` (forward)
  and one to ``mu_{t-1}`` (backward).
* a fixed Gaussian prior on ``mu`` at the first timestamp (never refined).

Every message is stored in natural parameters. Marginals are sums of the
messages and are always rebuilt from them, so they cannot drift out of sync.
With ``shared_cov`` the precisions of the h, r and u messages are a single
matrix shared by all timestamps (the last timestamp refined overwrites it);
otherwise every timestamp owns its own.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from .expfam import GaussianNat, bernoulli_product, log_odds, probit, probit_from_log_odds
from .model import Dataset, Hyperparams

_LOG_2PI = np.log(2.0 * np.pi)
_dger = linalg.blas.dger


class EPDivergenceError(RuntimeError):
    """Raised when a factor update produces non-finite parameters."""


@dataclass
class SweepRecord:
    iteration: int
    change: float
    eta: float
    neg_var: int
    skipped: int
    seconds: float


@dataclass
class Diagnostics:
    sweeps: list[SweepRecord] = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.sweeps)

    @property
    def changes(self) -> list[float]:
        return [s.change for s in self.sweeps]


@dataclass
class Posterior:
    """Moment-form summary of the assembled marginals.

    ``x_mean`` is the estimate X-hat; ``p_spike`` is ``Phi(z)``, the posterior
    probability that a component is exactly zero. ``mu_cov_last`` is the full
    covariance of ``mu`` at the final timestamp (what online filtering
    carries forward).
    """

    x_mean: np.ndarray
    x_var: np.ndarray
    z: np.ndarray
    gamma_mean: np.ndarray
    gamma_var: np.ndarray
    mu_mean: np.ndarray
    mu_cov_last: np.ndarray

    @property
    def p_spike(self) -> np.ndarray:
        return probit(self.z)


def gaussian_moments(P: np.ndarray, h: np.ndarray, full: bool = False):
    """Mean and (diagonal or full) covariance from natural parameters.

    Falls back to an eigendecomposition when ``P`` is not numerically
    positive definite; directions with (near) zero precision get infinite
    variance and the mean is the minimum-norm solution.
    """
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        w, U = np.linalg.eigh(0.5 * (P + P.T))
        keep = w > 1e-12 * max(w.max(), 0.0)
        Uk, wk = U[:, keep], w[keep]
        mean = Uk @ ((Uk.T @ h) / wk)
        if full:
            cov = (Uk / wk) @ Uk.T
            cov[np.ix_(*(2 * [np.sum(U[:, ~keep] ** 2, axis=1) > 1e-10]))] = np.inf
            return mean, cov
        var = np.sum(Uk**2 / wk, axis=1)
        var[np.sum(U[:, ~keep] ** 2, axis=1) > 1e-10] = np.inf
        return mean, var
    Linv = linalg.solve_triangular(L, np.eye(P.shape[0]), lower=True)
    mean = Linv.T @ (Linv @ h)
    if full:
        return mean, Linv.T @ Linv
    return mean, np.sum(Linv**2, axis=0)


def propagate(cavity: GaussianNat, noise_cov: np.ndarray) -> GaussianNat:
    """Message through additive Gaussian noise, in natural parameters.

    Returns the natural form of ``N(m, C + noise_cov)`` for a cavity
    ``N(m, C)``. It is computed as ``(I + P noise_cov)^-1 (P, h)``, which
    stays valid when the cavity precision ``P`` is singular (a vague cavity
    gives a vague message).
    """
    P, h = cavity.precision, cavity.shift
    M = np.eye(P.shape[0]) + P @ noise_cov
    lu = linalg.lu_factor(M, check_finite=True)
    prec = linalg.lu_solve(lu, P)
    shift = linalg.lu_solve(lu, h)
    return GaussianNat(0.5 * (prec + prec.T), shift)


def damp(new, old, eta: float):
    """Geometric mixture ``new^eta * old^(1-eta)`` of two factors.

    Gaussians (``GaussianNat`` or natural-parameter arrays) interpolate
    linearly in natural parameters. Use :func:`damp_probit` for probit
    scores.
    """
    if isinstance(new, GaussianNat):
        return GaussianNat(eta * new.precision + (1 - eta) * old.precision,
                           eta * new.shift + (1 - eta) * old.shift)
    return eta * np.asarray(new) + (1 - eta) * np.asarray(old)


def damp_probit(z_new, z_old, eta: float, clip: float = 8.0):
    """Damp probit scores in log-odds space (the Bernoulli natural parameter)."""
    lo = eta * log_odds(z_new) + (1 - eta) * log_odds(z_old)
    return probit_from_log_odds(lo, clip)


class EPState:
    """All approximating factors for one block of timestamps.

    ``prior`` is the fixed Gaussian factor on ``mu`` at the first timestamp
    of the block.
    """

    def __init__(self, data: Dataset, h: Hyperparams, prior: GaussianNat | None = None,
                 Sigma0: np.ndarray | None = None, W: np.ndarray | None = None):
        self.data = data
        self.hyper = h
        N, T = data.N, data.T
        self.N, self.T = N, T
        self.Sigma0 = h.spatial_cov(N) if Sigma0 is None else Sigma0
        self.W = h.temporal_cov(N) if W is None else W
        if prior is None:
            prior = GaussianNat.from_moments(np.zeros(N), h.mu0_scale * self.W)
        if prior.dim != N:
            raise ValueError(f"prior on mu has dimension {prior.dim}, expected {N}")
        self.prior = prior
        A = data.A
        self.g_prec = A.T @ A / h.sigma2
        self.g_shift = (A.T @ data.Y / h.sigma2).T.copy()

        ts = 1 if h.shared_cov else T
        self.f_prec = np.zeros((T, N))
        self.f_shift = np.zeros((T, N))
        self.f_z = np.zeros((T, N))
        self.h_prec = np.zeros((ts, N))
        self.h_shift = np.zeros((T, N))
        self.h_z = np.zeros((T, N))
        self.rg_prec = np.zeros((ts, N, N))
        self.rg_shift = np.zeros((T, N))
        self.rm_prec = np.zeros((ts, N, N))
        self.rm_shift = np.zeros((T, N))
        # u_t messages, indexed by t >= 1; row 0 is unused
        self.uf_prec = np.zeros((ts, N, N))
        self.uf_shift = np.zeros((T, N))
        self.ub_prec = np.zeros((ts, N, N))
        self.ub_shift = np.zeros((T, N))

        self.eta = h.eta
        self.iteration = 0
        self.neg_var = 0
        self.skipped = 0

    def k(self, t: int) -> int:
        """Storage row of time-shared precisions for timestamp ``t``."""
        return 0 if self.hyper.shared_cov else t

    # --- marginals in natural form -------------------------------------
    def x_nat(self, t: int) -> GaussianNat:
        return GaussianNat(self.g_prec + np.diag(self.f_prec[t]),
                           self.g_shift[t] + self.f_shift[t])

    def gamma_nat(self, t: int) -> GaussianNat:
        k = self.k(t)
        return GaussianNat(np.diag(self.h_prec[k]) + self.rg_prec[k],
                           self.h_shift[t] + self.rg_shift[t])

    def mu_nat(self, t: int) -> GaussianNat:
        k = self.k(t)
        prec = self.rm_prec[k].copy()
        shift = self.rm_shift[t].copy()
        if t == 0:
            prec += self.prior.precision
            shift += self.prior.shift
        if t > 0:
            prec += self.uf_prec[k]
            shift += self.uf_shift[t]
        if t < self.T - 1:
            prec += self.ub_prec[self.k(t + 1)]
            shift += self.ub_shift[t + 1]
        return GaussianNat(prec, shift)

    def omega_z(self, t: int) -> np.ndarray:
        return bernoulli_product(self.f_z[t], self.h_z[t], self.hyper.z_clip)

    def x_means(self) -> np.ndarray:
        out = np.empty((self.N, self.T))
        for t in range(self.T):
            nat = self.x_nat(t)
            out[:, t] = gaussian_moments(nat.precision, nat.shift)[0]
        return out


def init_state(data: Dataset, h: Hyperparams, prior: GaussianNat | None = None) -> EPState:
    """Likelihood factors from the data; every refinable factor vague."""
    return EPState(data, h, prior)


# ---------------------------------------------------------------------------
# tilted moments
# ---------------------------------------------------------------------------

@dataclass
class TiltedMoments:
    Z: np.ndarray
    mean: np.ndarray
    second: np.ndarray
    p_omega: np.ndarray
    var: np.ndarray
    log_odds_msg: np.ndarray  # log-odds of the refined Bernoulli factor


def _log_normal0(m, v):
    """``log N(0; m, v)``."""
    return -0.5 * (_LOG_2PI + np.log(v)) - 0.5 * m * m / v


def spike_slab_moments(m, v, z, sigma_x2: float) -> TiltedMoments:
    """Moments of ``N(x; m, v) Ber(w; Phi(z)) [w delta_0(x) + (1-w) N(x; 0, sigma_x2)]``.

    The slab branch integrates to ``N(0; m, v + sigma_x2)`` and its posterior
    mean is ``m sigma_x2 / (v + sigma_x2)``. Weights are combined in log
    space.
    """
    m, v, z = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (m, v, z)))
    log_n0 = _log_normal0(m, v)
    log_n1 = _log_normal0(m, v + sigma_x2)
    lw0 = special.log_ndtr(z) + log_n0
    lw1 = special.log_ndtr(-z) + log_n1
    logZ = np.logaddexp(lw0, lw1)
    p_spike = np.exp(lw0 - logZ)
    p_slab = np.exp(lw1 - logZ)
    ratio = sigma_x2 / (v + sigma_x2)
    slab_mean = m * ratio
    slab_var = v * ratio
    mean = p_slab * slab_mean
    second = p_slab * (slab_mean**2 + slab_var)
    var = p_slab * slab_var + p_slab * p_spike * slab_mean**2
    return TiltedMoments(np.exp(logZ), mean, second, p_spike, var, log_n0 - log_n1)


def probit_link_moments(nu, s, z) -> TiltedMoments:
    """Moments of ``N(g; nu, s) Ber(w; Phi(z)) Phi(g)^w (1 - Phi(g))^(1-w)``.

    Uses ``a = nu / sqrt(1 + s)`` and
    ``K = s N(a; 0, 1) / sqrt(1 + s) + nu Phi(a)``, the first moment of
    ``Phi(g) N(g; nu, s)``.
    """
    nu, s, z = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (nu, s, z)))
    root = np.sqrt(1.0 + s)
    a = nu / root
    pdf_a = np.exp(-0.5 * a * a) / np.sqrt(2.0 * np.pi)
    phi_a, phi_na = special.ndtr(a), special.ndtr(-a)
    pz, qz = special.ndtr(z), special.ndtr(-z)
    K = s * pdf_a / root + nu * phi_a
    second_pos = (nu**2 + s) * phi_a + 2.0 * nu * s * pdf_a / root - s**2 * a * pdf_a / (1.0 + s)
    Z = pz * phi_a + qz * phi_na
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = (pz * K + qz * (nu - K)) / Z
        second = ((pz - qz) * second_pos + qz * (s + nu**2)) / Z
        p_omega = pz * phi_a / Z
    var = second - mean**2
    lo = special.log_ndtr(a) - special.log_ndtr(-a)
    return TiltedMoments(Z, mean, second, p_omega, var, lo)


def _refine_diag(cav_prec, cav_shift, tm: TiltedMoments, h: Hyperparams):
    """New diagonal Gaussian factor ``q* / cavity``; returns (prec, shift, negative mask).

    Written as ``prec = (1 - c v) / v`` and ``mean = (E - s v) / (1 - c v)``
    (``c``, ``s`` cavity precision and shift, ``v``, ``E`` tilted variance and
    mean) so that a collapsing tilted variance stays finite.
    """
    var = np.maximum(tm.var, 0.0)
    one_minus = 1.0 - cav_prec * var
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(var > 0, one_minus / var, np.inf)
        mean = np.where(one_minus != 0, (tm.mean - cav_shift * var) / one_minus, tm.mean)
    negative = prec < 0
    prec = np.where(negative, 1.0 / h.neg_var_value, np.minimum(prec, h.max_precision))
    return prec, prec * mean, negative


def _check_finite(name: str, t: int | None, *arrays) -> None:
    """Raise naming the factor and position; ``t=None`` reads it from an (N, T) array."""
    for arr in arrays:
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))[0]
            if t is None:
                i, tt = int(bad[0]), int(bad[1])
            else:
                i, tt = (int(bad[-1]) if bad.size else -1), t
            raise EPDivergenceError(f"non-finite value in {name} at (i={i}, t={tt})")


# ---------------------------------------------------------------------------
# factor updates
# ---------------------------------------------------------------------------

def _f_refine(state: EPState, t: int, m, v, idx):
    """Refined f-messages for components ``idx`` given marginal means/variances there."""
    h = state.hyper
    old_prec, old_shift, old_z = state.f_prec[t, idx], state.f_shift[t, idx], state.f_z[t, idx]
    finite = np.isfinite(v)
    with np.errstate(divide="ignore"):
        marg_prec = np.where(finite, 1.0 / v, 0.0)
    cav_prec = marg_prec - old_prec
    cav_shift = np.where(finite, m * marg_prec, 0.0) - old_shift
    zc = state.h_z[t, idx]

    proper = cav_prec > 0
    vc = 1.0 / np.where(proper, cav_prec, 1.0)
    tm = spike_slab_moments(cav_shift * vc, vc, zc, h.sigma_x2)
    new_prec, new_shift, negative = _refine_diag(cav_prec, cav_shift, tm, h)
    new_lo = tm.log_odds_msg

    # flat cavity: the tilted distribution is the prior itself
    prior_var = special.ndtr(-zc) * h.sigma_x2
    new_prec = np.where(proper, new_prec, 1.0 / prior_var)
    new_shift = np.where(proper, new_shift, 0.0)
    new_lo = np.where(proper, new_lo, 0.0)
    negative &= proper

    keep = proper & (tm.Z < h.normalizer_floor)
    if h.neg_var_policy == "skip":
        keep |= negative
    state.skipped += int(keep.sum())
    state.neg_var += int(negative.sum())
    eta = state.eta
    f_prec = np.where(keep, old_prec, damp(new_prec, old_prec, eta))
    f_shift = np.where(keep, old_shift, damp(new_shift, old_shift, eta))
    lo = eta * new_lo + (1 - eta) * log_odds(old_z)
    f_z = np.where(keep, old_z, probit_from_log_odds(lo, h.z_clip))
    _check_finite("f-factor", t, f_prec, f_shift, f_z)
    return f_prec, f_shift, f_z


def _h_refine(state: EPState, t: int, nu, s, idx):
    """Refined h-messages for components ``idx`` given marginal means/variances there."""
    h = state.hyper
    k = state.k(t)
    old_prec, old_shift, old_z = state.h_prec[k, idx], state.h_shift[t, idx], state.h_z[t, idx]
    finite = np.isfinite(s)
    with np.errstate(divide="ignore"):
        marg_prec = np.where(finite, 1.0 / s, 0.0)
    cav_prec = marg_prec - old_prec
    cav_shift = np.where(finite, nu * marg_prec, 0.0) - old_shift
    zc = state.f_z[t, idx]

    proper = cav_prec > 0
    sc = 1.0 / np.where(proper, cav_prec, 1.0)
    tm = probit_link_moments(cav_shift * sc, sc, zc)
    new_prec, new_shift, negative = _refine_diag(cav_prec, cav_shift, tm, h)

    ok = proper & (tm.Z >= h.normalizer_floor) & np.isfinite(tm.var)
    if h.neg_var_policy == "skip":
        ok &= ~negative
    state.skipped += int((~ok).sum())
    state.neg_var += int((negative & ok).sum())
    eta = state.eta
    h_prec = np.where(ok, damp(new_prec, old_prec, eta), old_prec)
    h_shift = np.where(ok, damp(new_shift, old_shift, eta), old_shift)
    lo = eta * tm.log_odds_msg + (1 - eta) * log_odds(old_z)
    h_z = np.where(ok, probit_from_log_odds(lo, h.z_clip), old_z)
    _check_finite("h-factor", t, h_prec, h_shift, h_z)
    return h_prec, h_shift, h_z


# scalar versions of the refinements above, used by the sequential schedule
# where per-call array overhead would dominate

def _log_odds1(z: float) -> float:
    return float(special.log_ndtr(z) - special.log_ndtr(-z))


def _probit_from_log_odds1(lo: float, clip: float) -> float:
    e = math.exp(-abs(lo))
    small = e / (1.0 + e)
    z = float(special.ndtri(small))
    z = -z if lo >= 0 else z
    return min(max(z, -clip), clip)


def _refine_one(cav_prec, cav_shift, mean, var, h: Hyperparams):
    var = max(var, 0.0)
    one_minus = 1.0 - cav_prec * var
    prec = one_minus / var if var > 0 else math.inf
    m = (mean - cav_shift * var) / one_minus if one_minus != 0 else mean
    if prec < 0:
        prec = 1.0 / h.neg_var_value
        return prec, prec * m, True
    prec = min(prec, h.max_precision)
    return prec, prec * m, False


def _f_one(state: EPState, t: int, i: int, m: float, v: float):
    h = state.hyper
    old_prec, old_shift, old_z = state.f_prec[t, i], state.f_shift[t, i], state.f_z[t, i]
    marg_prec = 1.0 / v if math.isfinite(v) else 0.0
    cav_prec = marg_prec - old_prec
    cav_shift = m * marg_prec - old_shift
    zc = state.h_z[t, i]
    if cav_prec > 0:
        vc = 1.0 / cav_prec
        mc = cav_shift * vc
        log_n0 = -0.5 * (_LOG_2PI + math.log(vc)) - 0.5 * mc * mc / vc
        vs = vc + h.sigma_x2
        log_n1 = -0.5 * (_LOG_2PI + math.log(vs)) - 0.5 * mc * mc / vs
        lw0 = float(special.log_ndtr(zc)) + log_n0
        lw1 = float(special.log_ndtr(-zc)) + log_n1
        logZ = max(lw0, lw1) + math.log1p(math.exp(-abs(lw0 - lw1)))
        p_spike, p_slab = math.exp(lw0 - logZ), math.exp(lw1 - logZ)
        ratio = h.sigma_x2 / vs
        slab_mean, slab_var = mc * ratio, vc * ratio
        mean = p_slab * slab_mean
        var = p_slab * slab_var + p_slab * p_spike * slab_mean**2
        new_prec, new_shift, negative = _refine_one(cav_prec, cav_shift, mean, var, h)
        new_lo = log_n0 - log_n1
        keep = math.exp(logZ) < h.normalizer_floor or (negative and h.neg_var_policy == "skip")
    else:
        new_prec, new_shift, new_lo = 1.0 / (float(special.ndtr(-zc)) * h.sigma_x2), 0.0, 0.0
        negative = keep = False
    state.skipped += keep
    state.neg_var += negative
    if keep:
        return old_prec, old_shift, old_z
    eta = state.eta
    out = (eta * new_prec + (1 - eta) * old_prec, eta * new_shift + (1 - eta) * old_shift,
           _probit_from_log_odds1(eta * new_lo + (1 - eta) * _log_odds1(old_z), h.z_clip))
    if not all(map(math.isfinite, out)):
        raise EPDivergenceError(f"non-finite value in f-factor at (i={i}, t={t})")
    return out


def _h_one(state: EPState, t: int, i: int, nu: float, s: float):
    h = state.hyper
    old_prec, old_shift, old_z = state.h_prec[state.k(t), i], state.h_shift[t, i], state.h_z[t, i]
    marg_prec = 1.0 / s if math.isfinite(s) else 0.0
    cav_prec = marg_prec - old_prec
    cav_shift = nu * marg_prec - old_shift
    zc = state.f_z[t, i]
    ok = negative = False
    if cav_prec > 0:
        sc = 1.0 / cav_prec
        nc = cav_shift * sc
        root = math.sqrt(1.0 + sc)
        a = nc / root
        pdf_a = math.exp(-0.5 * a * a) / math.sqrt(2.0 * math.pi)
        phi_a, phi_na = float(special.ndtr(a)), float(special.ndtr(-a))
        pz, qz = float(special.ndtr(zc)), float(special.ndtr(-zc))
        Z = pz * phi_a + qz * phi_na
        if Z >= h.normalizer_floor:
            K = sc * pdf_a / root + nc * phi_a
            second_pos = ((nc**2 + sc) * phi_a + 2.0 * nc * sc * pdf_a / root
                          - sc**2 * a * pdf_a / (1.0 + sc))
            mean = (pz * K + qz * (nc - K)) / Z
            var = ((pz - qz) * second_pos + qz * (sc + nc**2)) / Z - mean**2
            if math.isfinite(var):
                new_prec, new_shift, negative = _refine_one(cav_prec, cav_shift, mean, var, h)
                new_lo = float(special.log_ndtr(a) - special.log_ndtr(-a))
                ok = not (negative and h.neg_var_policy == "skip")
    state.skipped += not ok
    state.neg_var += negative and ok
    if not ok:
        return old_prec, old_shift, old_z
    eta = state.eta
    out = (eta * new_prec + (1 - eta) * old_prec, eta * new_shift + (1 - eta) * old_shift,
           _probit_from_log_odds1(eta * new_lo + (1 - eta) * _log_odds1(old_z), h.z_clip))
    if not all(map(math.isfinite, out)):
        raise EPDivergenceError(f"non-finite value in h-factor at (i={i}, t={t})")
    return out


def _sequential(nat: GaussianNat, refine, write) -> bool:
    """Refine components one at a time, keeping the marginal in step by rank-one updates.

    ``refine(i, m, v)`` returns new ``(prec, shift, z)`` for component ``i``
    and ``write(i, prec, shift, z)`` stores them and returns the old
    ``(prec, shift)``. Returns False (doing nothing) when the marginal is
    not positive definite.
    """
    try:
        L = np.linalg.cholesky(nat.precision)
    except np.linalg.LinAlgError:
        return False
    Linv = linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)
    cov = Linv.T @ Linv
    mean = cov @ nat.shift
    for i in range(cov.shape[0]):
        prec, shift, z = refine(i, float(mean[i]), float(cov[i, i]))
        old_prec, old_shift = write(i, prec, shift, z)
        dp, dh = prec - old_prec, shift - old_shift
        if dp == 0.0 and dh == 0.0:
            continue
        col = cov[:, i].copy()
        denom = 1.0 + dp * col[i]
        if not denom > 0:
            raise EPDivergenceError(f"marginal lost positive definiteness at component {i}")
        mean += col * ((dh - dp * mean[i]) / denom)
        # in-place symmetric rank-one update; cov.T is the Fortran-ordered view
        _dger(-dp / denom, col, col, a=cov.T, overwrite_a=True)
    return True


def update_f(state: EPState, t: int) -> EPState:
    """Refine the spike-and-slab factor ``f_t``.

    The ``parallel`` schedule refines every component from the same
    marginal; ``sequential`` refines them in turn, refreshing the marginal
    after each one (used whenever the marginal is proper).
    """
    def write(idx, prec, shift, z):
        old = state.f_prec[t, idx].copy(), state.f_shift[t, idx].copy()
        state.f_prec[t, idx], state.f_shift[t, idx], state.f_z[t, idx] = prec, shift, z
        return old

    nat = state.x_nat(t)
    if state.hyper.schedule == "sequential" and _sequential(
            nat, lambda i, m, v: _f_one(state, t, i, m, v), write):
        return state
    m, v = gaussian_moments(nat.precision, nat.shift)
    write(slice(None), *_f_refine(state, t, m, v, slice(None)))
    return state


def update_h(state: EPState, t: int) -> EPState:
    """Refine the probit-link factor ``h_t`` (schedules as in :func:`update_f`)."""
    k = state.k(t)

    def write(idx, prec, shift, z):
        old = state.h_prec[k, idx].copy(), state.h_shift[t, idx].copy()
        state.h_prec[k, idx], state.h_shift[t, idx], state.h_z[t, idx] = prec, shift, z
        return old

    nat = state.gamma_nat(t)
    if state.hyper.schedule == "sequential" and _sequential(
            nat, lambda i, m, v: _h_one(state, t, i, m, v), write):
        return state
    nu, s = gaussian_moments(nat.precision, nat.shift)
    write(slice(None), *_h_refine(state, t, nu, s, slice(None)))
    return state


def _safe_propagate(state: EPState, cavity: GaussianNat, noise: np.ndarray) -> GaussianNat | None:
    for attempt in range(2):
        try:
            msg = propagate(cavity, noise)
            if np.all(np.isfinite(msg.precision)) and np.all(np.isfinite(msg.shift)):
                return msg
        except (np.linalg.LinAlgError, ValueError):
            pass
        P = cavity.precision
        jitter = 1e-8 * max(float(np.max(np.abs(np.diag(P)))), 1.0)
        cavity = GaussianNat(P + jitter * np.eye(P.shape[0]), cavity.shift)
    state.skipped += 1
    return None


def update_r(state: EPState, t: int) -> EPState:
    """Refine ``r_t``: the messages between ``gamma_t`` and ``mu_t`` through ``Sigma_0``."""
    k = state.k(t)
    eta = state.eta
    cav_gamma = state.gamma_nat(t) / GaussianNat(state.rg_prec[k], state.rg_shift[t])
    cav_mu = state.mu_nat(t) / GaussianNat(state.rm_prec[k], state.rm_shift[t])
    to_gamma = _safe_propagate(state, cav_mu, state.Sigma0)
    to_mu = _safe_propagate(state, cav_gamma, state.Sigma0)
    if to_gamma is not None:
        new = damp(to_gamma, GaussianNat(state.rg_prec[k], state.rg_shift[t]), eta)
        _check_finite("r-factor", t, new.precision, new.shift)
        state.rg_prec[k], state.rg_shift[t] = new.precision, new.shift
    if to_mu is not None:
        new = damp(to_mu, GaussianNat(state.rm_prec[k], state.rm_shift[t]), eta)
        _check_finite("r-factor", t, new.precision, new.shift)
        state.rm_prec[k], state.rm_shift[t] = new.precision, new.shift
    return state


def update_u(state: EPState, t: int) -> EPState:
    """Refine ``u_t`` (``t >= 1``): messages between ``mu_{t-1}`` and ``mu_t`` through ``W``."""
    if not 1 <= t < state.T:
        raise ValueError(f"u-factor index must lie in [1, {state.T - 1}], got {t}")
    k = state.k(t)
    eta = state.eta
    old_b = GaussianNat(state.ub_prec[k], state.ub_shift[t])
    old_f = GaussianNat(state.uf_prec[k], state.uf_shift[t])
    cav_prev = state.mu_nat(t - 1) / old_b
    cav_cur = state.mu_nat(t) / old_f
    fwd = _safe_propagate(state, cav_prev, state.W)
    bwd = _safe_propagate(state, cav_cur, state.W)
    if fwd is not None:
        new = damp(fwd, old_f, eta)
        _check_finite("u-factor", t, new.precision, new.shift)
        state.uf_prec[k], state.uf_shift[t] = new.precision, new.shift
    if bwd is not None:
        new = damp(bwd, old_b, eta)
        _check_finite("u-factor", t, new.precision, new.shift)
        state.ub_prec[k], state.ub_shift[t] = new.precision, new.shift
    return state


def assemble_marginals(state: EPState) -> Posterior:
    N, T = state.N, state.T
    x_mean, x_var = np.empty((N, T)), np.empty((N, T))
    g_mean, g_var = np.empty((N, T)), np.empty((N, T))
    mu_mean, z = np.empty((N, T)), np.empty((N, T))
    mu_cov = None
    for t in range(T):
        nat = state.x_nat(t)
        x_mean[:, t], x_var[:, t] = gaussian_moments(nat.precision, nat.shift)
        nat = state.gamma_nat(t)
        g_mean[:, t], g_var[:, t] = gaussian_moments(nat.precision, nat.shift)
        nat = state.mu_nat(t)
        if t == T - 1:
            mu_mean[:, t], mu_cov = gaussian_moments(nat.precision, nat.shift, full=True)
        else:
            mu_mean[:, t] = gaussian_moments(nat.precision, nat.shift)[0]
        z[:, t] = state.omega_z(t)
    return Posterior(x_mean, x_var, z, g_mean, g_var, mu_mean, mu_cov)


def sweep(state: EPState) -> EPState:
    """One pass of f, h, r (and u for t >= 1) over all timestamps."""
    for t in range(state.T):
        update_f(state, t)
        update_h(state, t)
        update_r(state, t)
        if t >= 1:
            update_u(state, t)
    return state


def run_ep(data: Dataset, h: Hyperparams, prior: GaussianNat | None = None,
           callback=None) -> tuple[EPState, Posterior, Diagnostics]:
    """Iterate sweeps until the relative max-abs change of X-hat drops below ``h.tol``.

    The damping coefficient is multiplied by ``h.xi`` after every sweep.
    ``callback(state, record)`` is called after each sweep if given.
    """
    start = time.perf_counter()
    state = init_state(data, h, prior)
    diag = Diagnostics()
    x_old = np.zeros((data.N, data.T))
    for it in range(h.max_iter):
        t0 = time.perf_counter()
        state.neg_var = state.skipped = 0
        sweep(state)
        state.iteration += 1
        x_new = state.x_means()
        _check_finite("posterior mean", None, x_new)
        scale = np.max(np.abs(x_old))
        diff = np.max(np.abs(x_new - x_old))
        if it == 0:
            change = np.inf  # no previous estimate to compare with
        else:
            change = diff / scale if scale > 0 else (0.0 if diff == 0 else np.inf)
        rec = SweepRecord(state.iteration, float(change), state.eta, state.neg_var,
                          state.skipped, time.perf_counter() - t0)
        diag.sweeps.append(rec)
        if callback is not None:
            callback(state, rec)
        x_old = x_new
        state.eta *= h.xi
        if change < h.tol:
            diag.converged = True
            break
    post = assemble_marginals(state)
    diag.wall_time = time.perf_counter() - start
    return state, post, diag


def run_offline(data: Dataset, h: Hyperparams) -> tuple[EPState, Posterior, Diagnostics]:
    """Batch inference with the default ``N(0, mu0_scale * W)`` prior on the first ``mu``."""
    return run_ep(data, h)
