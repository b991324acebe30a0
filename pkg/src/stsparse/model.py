"""Generative model, hyperparameters and synthetic data.

Signals are ``N x T`` matrices with one column per timestamp. The spike
indicator ``Omega`` follows the model convention: ``1`` means the component
is exactly zero (spike), ``0`` means it is drawn from the slab.

All randomness goes through ``numpy.random.Generator`` with the PCG64 bit
generator, seeded from an int or a sequence of ints.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from .kernels import KernelSpec


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class Hyperparams:
    """Model constants and EP controls.

    Defaults are the synthetic-data column of the published hyperparameter
    table (slab variance 1e4, noise variance 1e-4, eta 0.999, xi 0.9999,
    temporal lengthscale 15 / amplitude 10, spatial lengthscale 10 /
    amplitude 10).
    """

    sigma_x2: float = 1e4
    sigma2: float = 1e-4
    eta: float = 0.999
    xi: float = 0.9999
    ell_w: float = 15.0
    ell_sigma: float = 10.0
    alpha_w: float = 10.0
    alpha_sigma: float = 10.0
    tol: float = 1e-3
    max_iter: int = 200
    neg_var_value: float = 1e10
    neg_var_policy: str = "replace"
    schedule: str = "sequential"
    normalizer_floor: float = 1e-12
    max_precision: float = 1e12
    z_clip: float = 8.0
    shared_cov: bool = False
    mu0_scale: float = 1.0
    kernel: str = "squared_exponential"
    locations: np.ndarray | None = field(default=None, compare=False, repr=False)
    distance_scale: float = 1.0
    cross_axis: str = "zero"

    def __post_init__(self):
        checks = {
            "sigma2": self.sigma2 > 0,
            "sigma_x2": self.sigma_x2 > 0,
            "eta": 0 < self.eta <= 1,
            "xi": 0 < self.xi <= 1,
            "tol": self.tol > 0,
            "max_iter": self.max_iter >= 1,
            "neg_var_value": self.neg_var_value > 0,
            "normalizer_floor": self.normalizer_floor >= 0,
            "max_precision": self.max_precision > 0,
            "z_clip": self.z_clip > 0,
            "mu0_scale": self.mu0_scale > 0,
        }
        checks["schedule"] = self.schedule in ("parallel", "sequential")
        checks["neg_var_policy"] = self.neg_var_policy in ("replace", "skip")
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"hyperparameters out of range: {', '.join(bad)}")
        # kernel parameters are validated by KernelSpec
        self.spatial_kernel()
        self.temporal_kernel()

    def _kernel(self, alpha: float, ell: float) -> KernelSpec:
        return KernelSpec(kind=self.kernel, alpha=alpha, ell=ell, locations=self.locations,
                          distance_scale=self.distance_scale, cross_axis=self.cross_axis)

    def spatial_kernel(self) -> KernelSpec:
        return self._kernel(self.alpha_sigma, self.ell_sigma)

    def temporal_kernel(self) -> KernelSpec:
        return self._kernel(self.alpha_w, self.ell_w)

    def spatial_cov(self, n: int) -> np.ndarray:
        return self.spatial_kernel().build(n)

    def temporal_cov(self, n: int) -> np.ndarray:
        return self.temporal_kernel().build(n)

    def with_(self, **kw) -> "Hyperparams":
        return replace(self, **kw)


@dataclass
class Dataset:
    A: np.ndarray
    Y: np.ndarray
    X: np.ndarray | None = None
    Omega: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if self.A.ndim != 2 or self.Y.ndim != 2:
            raise ValueError("A and Y must be matrices")
        if self.A.shape[0] != self.Y.shape[0]:
            raise ValueError(f"A has {self.A.shape[0]} rows but Y has {self.Y.shape[0]}")
        for name in ("X", "Omega"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=float)
                if val.shape != (self.N, self.T):
                    raise ValueError(f"{name} has shape {val.shape}, expected {(self.N, self.T)}")
                setattr(self, name, val)

    @property
    def K(self) -> int:
        return self.A.shape[0]

    @property
    def N(self) -> int:
        return self.A.shape[1]

    @property
    def T(self) -> int:
        return self.Y.shape[1]

    def window(self, start: int, stop: int) -> "Dataset":
        """Timestamps ``start:stop`` (0-based, half-open)."""
        cut = (lambda m: None if m is None else m[:, start:stop])
        return Dataset(self.A, self.Y[:, start:stop], cut(self.X), cut(self.Omega))


@dataclass
class LatentTruth:
    X: np.ndarray
    Omega: np.ndarray
    Gamma: np.ndarray
    M: np.ndarray


def _mvn(rng: np.random.Generator, cov: np.ndarray, size: int | None = None) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    n = cov.shape[0]
    if size is None:
        return chol @ rng.standard_normal(n)
    return chol @ rng.standard_normal((n, size))


def sample_generative(h: Hyperparams, N: int, T: int, K: int, seed,
                      mu0_mean: float = 0.0) -> tuple[Dataset, LatentTruth]:
    """Draw one dataset from the full hierarchical model.

    ``mu_1 ~ N(mu0_mean, W)``, ``mu_t ~ N(mu_{t-1}, W)``,
    ``gamma_t ~ N(mu_t, Sigma_0)``, ``omega ~ Ber(Phi(gamma))``, slab values
    ``N(0, sigma_x2)``, ``y_t = A x_t + N(0, sigma2 I)`` with iid standard
    normal ``A``.
    """
    if min(N, T, K) < 1:
        raise ValueError("N, T and K must be >= 1")
    rng = _rng(seed)
    W = h.temporal_cov(N)
    S0 = h.spatial_cov(N)
    M = np.empty((N, T))
    M[:, 0] = mu0_mean + _mvn(rng, W)
    for t in range(1, T):
        M[:, t] = M[:, t - 1] + _mvn(rng, W)
    Gamma = M + _mvn(rng, S0, T)
    Omega = (rng.random((N, T)) < special.ndtr(Gamma)).astype(float)
    X = np.where(Omega == 1, 0.0, np.sqrt(h.sigma_x2) * rng.standard_normal((N, T)))
    A = rng.standard_normal((K, N))
    Y = A @ X + np.sqrt(h.sigma2) * rng.standard_normal((K, T))
    return Dataset(A, Y, X, Omega), LatentTruth(X, Omega, Gamma, M)


def border_moves(rng: np.random.Generator, n: int, move_prob: float, bias) -> np.ndarray:
    """Sample ``n`` border steps in {-1, 0, +1} measured as "grow" direction.

    ``+1`` grows the group, ``-1`` shrinks it. ``bias`` shifts ``bias`` of
    probability mass from shrinking to growing (negative values do the
    opposite); it may be a scalar or a length-``n`` array.
    """
    bias = np.broadcast_to(np.asarray(bias, dtype=float), (n,))
    p_grow = np.clip(move_prob + bias, 0.0, 1.0)
    p_shrink = np.clip(move_prob - bias, 0.0, 1.0)
    u = rng.random(n)
    return np.where(u < p_grow, 1, np.where(u < p_grow + p_shrink, -1, 0))


def generate_structured_groups(N: int, T: int, seed, n_groups: int = 2,
                               target_sparsity: float = 0.95, value_variance: float = 1e4,
                               move_prob: float = 0.15, drift: float = 0.1,
                               band: float = 0.1, return_moves: bool = False):
    """Slowly evolving contiguous groups of non-zero entries.

    At ``t=0`` each group is an interval whose length is Poisson with mean
    ``N (1 - target_sparsity) / n_groups`` (zero draws rejected) at a uniform
    random start. Afterwards every border independently grows, shrinks or
    stays; the base probability is ``move_prob`` each way. A bias of up to
    ``drift`` (reached when the deficit is ``band`` of the target) moves
    probability between growing and shrinking; the deficit adds the gap of
    the current slab count to ``N (1 - target_sparsity)`` and the gap of the
    cumulative count, so the average over time tracks the target. Border
    positions walk freely; a group shows as its interval clipped to
    ``[0, N)`` and vanishes while its borders have crossed.

    Returns ``(X, Omega)`` and, with ``return_moves``, the ``(T-1, n_groups, 2)``
    array of sampled border steps in grow/shrink units.
    """
    if N < 1 or T < 1 or n_groups < 1:
        raise ValueError("N, T and n_groups must be >= 1")
    if not 0 < target_sparsity < 1:
        raise ValueError("target_sparsity must lie in (0, 1)")
    rng = _rng(seed)
    target = N * (1.0 - target_sparsity)
    mean_len = target / n_groups
    lo = np.empty(n_groups, dtype=int)
    hi = np.empty(n_groups, dtype=int)
    for g in range(n_groups):
        length = 0
        while length == 0:
            length = int(rng.poisson(mean_len))
        length = min(length, N)
        lo[g] = int(rng.integers(0, N - length + 1))
        hi[g] = lo[g] + length

    mask = np.zeros((N, T), dtype=bool)
    moves = np.zeros((max(T - 1, 0), n_groups, 2), dtype=int)
    for t in range(T):
        if t > 0:
            count = mask[:, t - 1].sum()
            # steer both the current count and the running average towards the
            # target; saturates at +-drift
            deficit = (target - count) + (target * t - mask[:, :t].sum())
            bias = drift * np.clip(deficit / (band * target), -1.0, 1.0)
            step = border_moves(rng, 2 * n_groups, move_prob, bias).reshape(n_groups, 2)
            moves[t - 1] = step
            lo = lo - step[:, 0]
            hi = hi + step[:, 1]
        for g in range(n_groups):
            mask[max(lo[g], 0):max(min(hi[g], N), 0), t] = True

    X = np.where(mask, np.sqrt(value_variance) * rng.standard_normal((N, T)), 0.0)
    Omega = (~mask).astype(float)
    if return_moves:
        return X, Omega, moves
    return X, Omega


def make_design_matrix(K: int, N: int, seed) -> np.ndarray:
    return _rng(seed).standard_normal((K, N))


def observe(A: np.ndarray, X: np.ndarray, sigma2: float, seed) -> np.ndarray:
    Y = A @ X
    if sigma2 > 0:
        Y = Y + np.sqrt(sigma2) * _rng(seed).standard_normal(Y.shape)
    return Y


def synthetic_dataset(N: int, T: int, ratio: float, seed: int, n_groups: int = 2,
                      target_sparsity: float = 0.95, value_variance: float = 1e4,
                      noise_variance: float = 0.0) -> Dataset:
    """One cell of the synthetic benchmark.

    The signal depends only on ``seed``; the design matrix additionally on
    ``K = round(ratio * N)``, so sweeping the ratio re-observes the same
    signal.
    """
    if not 0 < ratio <= 1:
        raise ValueError(f"undersampling ratio must lie in (0, 1], got {ratio}")
    K = max(1, int(round(ratio * N)))
    X, Omega = generate_structured_groups(N, T, [seed, 0], n_groups, target_sparsity,
                                          value_variance)
    A = make_design_matrix(K, N, [seed, 1, K])
    Y = observe(A, X, noise_variance, [seed, 2, K])
    return Dataset(A, Y, X, Omega)
