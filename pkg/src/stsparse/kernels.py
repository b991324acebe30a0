"""Covariance matrices for the spatial (Sigma_0) and temporal (W) GP levels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_JITTER_REL = 1e-6


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, msg: str, min_eig: float):
        super().__init__(f"{msg} (smallest eigenvalue {min_eig:.3e})")
        self.min_eig = min_eig


def _check_params(alpha: float, ell: float, jitter: float | None) -> None:
    if not alpha > 0:
        raise ValueError(f"amplitude must be positive, got {alpha}")
    if not ell > 0:
        raise ValueError(f"lengthscale must be positive, got {ell}")
    if jitter is not None and jitter < 0:
        raise ValueError(f"jitter must be nonnegative, got {jitter}")


def ensure_psd(m: np.ndarray, jitter: float = 0.0, max_doublings: int = 6) -> np.ndarray:
    """Return ``m + jitter * I``, growing the jitter until Cholesky succeeds.

    The jitter is doubled at most ``max_doublings`` times. A zero starting
    jitter that fails is bumped to ``1e-12 * max|diag|`` before doubling.
    """
    m = np.asarray(m, dtype=float)
    m = 0.5 * (m + m.T)
    eye = np.eye(m.shape[0])
    current = float(jitter)
    for attempt in range(max_doublings + 1):
        candidate = m + current * eye
        try:
            np.linalg.cholesky(candidate)
            return candidate
        except np.linalg.LinAlgError:
            if current == 0.0:
                current = 1e-12 * max(float(np.max(np.abs(np.diag(m)))), 1.0)
            else:
                current *= 2.0
    min_eig = float(np.linalg.eigvalsh(m)[0])
    raise NotPositiveDefiniteError("matrix not positive definite after jitter", min_eig)


def build_se_kernel(n: int, alpha: float, ell: float, jitter: float | None = None) -> np.ndarray:
    """Squared-exponential covariance over the integer grid ``0..n-1``.

    ``K[i, j] = alpha * exp(-(i - j)^2 / (2 ell^2))`` plus ``jitter`` on the
    diagonal (default ``1e-6 * alpha``).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    _check_params(alpha, ell, jitter)
    if jitter is None:
        jitter = DEFAULT_JITTER_REL * alpha
    idx = np.arange(n, dtype=float)
    diff = idx[:, None] - idx[None, :]
    k = alpha * np.exp(-diff**2 / (2.0 * ell**2))
    return ensure_psd(k, jitter)


def build_dipole_kernel(locations, alpha: float, ell: float, jitter: float | None = None,
                        distance_scale: float = 1.0, cross_axis: str = "zero") -> np.ndarray:
    """Covariance over dipole moments ordered ``(v1x, v1y, v1z, v2x, ...)``.

    Same-axis entries decay with the squared Euclidean distance between
    voxels (times ``distance_scale``). Entries coupling different axes are 0
    with ``cross_axis="zero"``; ``cross_axis="literal"`` instead treats their
    distance as 0, which gives them the full amplitude ``alpha``.
    """
    _check_params(alpha, ell, jitter)
    if cross_axis not in ("zero", "literal"):
        raise ValueError(f"cross_axis must be 'zero' or 'literal', got {cross_axis!r}")
    loc = np.asarray(locations, dtype=float)
    if loc.ndim != 2 or loc.shape[1] != 3 or loc.shape[0] < 1:
        raise ValueError(f"locations must be a (voxels, 3) array, got shape {loc.shape}")
    if not np.all(np.isfinite(loc)):
        raise ValueError("locations contain non-finite values")
    if jitter is None:
        jitter = DEFAULT_JITTER_REL * alpha
    sq = np.sum((loc[:, None, :] - loc[None, :, :]) ** 2, axis=-1) * distance_scale
    voxel_k = alpha * np.exp(-sq / (2.0 * ell**2))
    k = np.kron(voxel_k, np.eye(3))
    if cross_axis == "literal":
        k = k + alpha * np.kron(np.ones_like(voxel_k), np.ones((3, 3)) - np.eye(3))
    return ensure_psd(k, jitter)


def load_locations(path) -> np.ndarray:
    """Read a voxel locations file: one ``x y z`` line per voxel."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no locations")
    return np.array(rows)


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "squared_exponential"
    alpha: float = 1.0
    ell: float = 1.0
    jitter: float | None = None
    locations: np.ndarray | None = None
    distance_scale: float = 1.0
    cross_axis: str = "zero"

    def __post_init__(self):
        _check_params(self.alpha, self.ell, self.jitter)
        if self.kind not in ("squared_exponential", "dipole"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "dipole" and self.locations is None:
            raise ValueError("dipole kernel needs voxel locations")

    def build(self, n: int) -> np.ndarray:
        if self.kind == "squared_exponential":
            return build_se_kernel(n, self.alpha, self.ell, self.jitter)
        k = build_dipole_kernel(self.locations, self.alpha, self.ell, self.jitter,
                                self.distance_scale, self.cross_axis)
        if k.shape[0] != n:
            raise ValueError(f"dipole kernel has size {k.shape[0]}, signal has {n}")
        return k
