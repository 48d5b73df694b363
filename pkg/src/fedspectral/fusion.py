"""Rank-adaptive Kalman filtering of per-client contribution signals.

Each client carries a scalar latent contribution estimate observed through
two channels per round: the normalized smoothed entropy and the normalized
smoothed class-alignment score. The measurement covariance is recomputed
every round from the Spearman rank agreement between the filter's own
predictions and each incoming channel, so a channel that keeps reshuffling
the client ordering is trusted less.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .linalg import as_vector, spearman

DEFAULT_PROCESS_NOISE = 1e-4
DEFAULT_NOISE_FLOOR = 1e-3
DEFAULT_PRIOR_VARIANCE = 0.1


@dataclass
class KalmanState:
    """Per-client estimate/variance pairs plus the shared filter constants.

    The observation matrix is fixed at [1, 1]^T: both channels measure the
    same scalar state directly.
    """

    estimates: np.ndarray
    variances: np.ndarray
    process_noise: float
    noise_floor: float

    @classmethod
    def create(
        cls,
        n_clients: int,
        process_noise: float = DEFAULT_PROCESS_NOISE,
        noise_floor: float = DEFAULT_NOISE_FLOOR,
        prior_variance: float = DEFAULT_PRIOR_VARIANCE,
    ) -> "KalmanState":
        if n_clients < 1:
            raise ContractError("need at least one client")
        if process_noise < 0.0 or noise_floor <= 0.0 or prior_variance <= 0.0:
            raise ContractError("need process_noise >= 0, noise_floor > 0, prior_variance > 0")
        return cls(
            estimates=np.full(n_clients, 1.0 / n_clients),
            variances=np.full(n_clients, prior_variance),
            process_noise=process_noise,
            noise_floor=noise_floor,
        )

    @property
    def n_clients(self) -> int:
        return self.estimates.shape[0]


def predict(state: KalmanState) -> tuple[np.ndarray, np.ndarray]:
    """Time update: estimates persist, variances inflate by the process noise."""
    state.variances = state.variances + state.process_noise
    return state.estimates.copy(), state.variances.copy()


def rank_adapt(predictions, s, gamma, noise_floor: float) -> tuple[float, float, np.ndarray]:
    """Measurement covariance diagonal from rank agreement with predictions.

    Each channel's variance is (1 - rank correlation) + floor, shared by all
    clients. All-tied predictions (round one's uniform prior) give both
    channels the semi-reliable value 1 + floor.
    """
    p = as_vector(predictions, "predictions")
    sv = as_vector(s, "entropy observations")
    gv = as_vector(gamma, "alignment observations")
    if not p.shape == sv.shape == gv.shape:
        raise DimensionError("predictions and observations must have equal length")
    rho_s = spearman(p, sv)
    rho_g = spearman(p, gv)
    r = np.array([(1.0 - rho_s) + noise_floor, (1.0 - rho_g) + noise_floor])
    return rho_s, rho_g, r


def update(estimate: float, variance: float, observation, r: np.ndarray) -> tuple[float, float]:
    """Measurement update for one client from a 2-channel observation.

    With the fixed [1, 1]^T observation map the 2x2 innovation covariance
    inverts in closed form; the posterior variance is p * r0 * r1 / det,
    always in (0, p].
    """
    y = as_vector(observation, "observation")
    rv = as_vector(r, "measurement variances")
    if y.shape[0] != 2 or rv.shape[0] != 2:
        raise DimensionError("observation and R diagonal must have length 2")
    if variance <= 0.0:
        raise ContractError(f"state variance must be positive, got {variance}")
    det = variance * rv[0] + variance * rv[1] + rv[0] * rv[1]
    if det <= 0.0:
        raise ContractError("innovation covariance is singular; R diagonal must stay positive")
    gain = np.array([variance * rv[1], variance * rv[0]]) / det
    new_estimate = estimate + gain[0] * (y[0] - estimate) + gain[1] * (y[1] - estimate)
    new_variance = variance * rv[0] * rv[1] / det
    return float(new_estimate), float(new_variance)


def filter_step(state: KalmanState, s, gamma) -> np.ndarray:
    """One full round: predict, adapt R from rank agreement, update all clients.

    R and the predictions are fixed before any client updates, so the
    per-client updates are order-independent.
    """
    sv = as_vector(s, "entropy observations")
    gv = as_vector(gamma, "alignment observations")
    if sv.shape[0] != state.n_clients or gv.shape[0] != state.n_clients:
        raise DimensionError("observation vectors must cover every client")
    x_pred, p_pred = predict(state)
    _, _, r = rank_adapt(x_pred, sv, gv, state.noise_floor)
    for i in range(state.n_clients):
        x, p = update(float(x_pred[i]), float(p_pred[i]), (sv[i], gv[i]), r)
        state.estimates[i] = x
        state.variances[i] = p
    return state.estimates.copy()
