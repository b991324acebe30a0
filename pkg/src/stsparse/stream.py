"""Online filtering: warm start on a prefix, then predict/update per block.

The only state carried between blocks is the Gaussian posterior
``N(mu; e, D)`` of the GP mean at the latest timestamp. Prediction adds the
random-walk covariance ``W``; the predicted Gaussian then enters the next
block's EP run as a fixed prior factor on its first ``mu`` and is never
refined. Past timestamps are frozen (filtering, no smoothing).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ep import Diagnostics, EPDivergenceError, Posterior, run_ep
from .expfam import GaussianNat
from .kernels import ensure_psd
from .model import Dataset, Hyperparams

DEFAULT_T_INIT = 10
DEFAULT_BLOCK = 1


@dataclass
class StepSummary:
    """Posterior summary of one timestamp."""

    t: int
    x_mean: np.ndarray
    x_var: np.ndarray
    z: np.ndarray


@dataclass
class StreamState:
    t: int
    e: np.ndarray
    D: np.ndarray
    hyper: Hyperparams
    A: np.ndarray
    W: np.ndarray
    summaries: list[StepSummary] = field(default_factory=list)
    diagnostics: list[Diagnostics] = field(default_factory=list)

    @property
    def N(self) -> int:
        return self.A.shape[1]

    def x_hat(self) -> np.ndarray:
        """``N x t`` matrix of posterior means over every timestamp seen so far."""
        return np.column_stack([s.x_mean for s in self.summaries])

    def z(self) -> np.ndarray:
        return np.column_stack([s.z for s in self.summaries])

    def step_seconds(self) -> list[float]:
        return [d.wall_time for d in self.diagnostics]


def _append(state: StreamState, post: Posterior, diag: Diagnostics) -> None:
    for j in range(post.x_mean.shape[1]):
        state.t += 1
        state.summaries.append(StepSummary(state.t, post.x_mean[:, j].copy(),
                                           post.x_var[:, j].copy(), post.z[:, j].copy()))
    state.e = post.mu_mean[:, -1].copy()
    D = 0.5 * (post.mu_cov_last + post.mu_cov_last.T)
    state.D = D
    state.diagnostics.append(diag)


def init_stream(prefix: Dataset, h: Hyperparams) -> StreamState:
    """Offline inference on the first ``T_init`` timestamps."""
    if prefix.T < 1:
        raise ValueError("the warm-start prefix needs at least one timestamp")
    _, post, diag = run_ep(prefix, h)
    state = StreamState(0, np.zeros(prefix.N), np.zeros((prefix.N, prefix.N)), h,
                        prefix.A, h.temporal_cov(prefix.N))
    _append(state, post, diag)
    return state


def predict(state: StreamState) -> tuple[np.ndarray, np.ndarray]:
    """Predicted prior of the next ``mu``: mean unchanged, covariance ``D + W``."""
    return state.e.copy(), state.D + state.W


def update(state: StreamState, Y_new, prior: tuple[np.ndarray, np.ndarray] | None = None
           ) -> StreamState:
    """Condition on a ``K x M`` block of new observations.

    ``prior`` is the predicted ``(e, D_pred)``; by default it is taken from
    :func:`predict`. The damping coefficient restarts at ``hyper.eta``.
    """
    Y_new = np.asarray(Y_new, dtype=float)
    if Y_new.ndim == 1:
        Y_new = Y_new[:, None]
    if Y_new.shape[1] < 1:
        raise ValueError("update needs at least one timestamp")
    e, D_pred = predict(state) if prior is None else prior
    p_hat = GaussianNat.from_moments(e, ensure_psd(D_pred))
    block = Dataset(state.A, Y_new)
    try:
        _, post, diag = run_ep(block, state.hyper, prior=p_hat)
    except EPDivergenceError as exc:
        raise EPDivergenceError(f"block starting at timestamp {state.t + 1}: {exc}") from exc
    _append(state, post, diag)
    return state


def step(state: StreamState, y) -> StreamState:
    """One predict/update cycle for a single timestamp."""
    return update(state, np.asarray(y, dtype=float).reshape(-1, 1), predict(state))


def run_stream(data: Dataset, h: Hyperparams, t_init: int = DEFAULT_T_INIT,
               block: int = DEFAULT_BLOCK) -> StreamState:
    """Warm start on ``data[:, :t_init]`` and stream the rest in blocks of ``block``."""
    if not 1 <= t_init <= data.T:
        raise ValueError(f"t_init must lie in [1, {data.T}], got {t_init}")
    if block < 1:
        raise ValueError("block size must be >= 1")
    state = init_stream(data.window(0, t_init), h)
    for start in range(t_init, data.T, block):
        update(state, data.Y[:, start:start + block])
    return state
