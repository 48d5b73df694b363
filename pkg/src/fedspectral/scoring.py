"""Data-free per-round client scores.

Spectral (matrix) entropy of the class-space Gram of an update matrix,
per-class alignment against the cohort update, whole-update cosine score,
exponential smoothing, and projection of score vectors onto the simplex.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import linalg
from .errors import ContractError, DimensionError
from .nn import LayerUpdate

logger = logging.getLogger(__name__)

DEFAULT_WEIGHT_FLOOR = 1e-6

SIGNAL_NAMES = ("entropy", "cssv", "cgsv")


class EntropyMode(Enum):
    """How the Gram matrix is normalized before taking its spectrum.

    TRACE divides by the trace so eigenvalues form a probability vector;
    FROBENIUS divides by the Frobenius norm, which differs only by a scale
    factor in the resulting score.
    """

    TRACE = "trace"
    FROBENIUS = "frobenius"


def spectral_entropy(m, mode: EntropyMode = EntropyMode.TRACE) -> float:
    """Entropy of the normalized spectrum of M M^T.

    A high value means the update spreads its energy across many class
    directions. Zero matrices are degenerate (nothing was learned) and
    score 0.
    """
    mat = linalg.as_matrix(m, "update matrix")
    if float(np.linalg.norm(mat)) <= linalg.ZERO_NORM_TOL:
        logger.warning("degenerate update: zero matrix scored with entropy 0")
        return 0.0
    gram = linalg.gram_class_space(mat)
    if mode is EntropyMode.TRACE:
        scale = float(np.trace(gram))
    elif mode is EntropyMode.FROBENIUS:
        scale = float(np.linalg.norm(gram))
    else:
        raise ContractError(f"unknown entropy mode {mode!r}")
    eigs = linalg.clamp_psd(linalg.sym_eigenvalues(gram / scale))
    pos = eigs[eigs > 0.0]
    return float(max(-np.sum(pos * np.log(pos)), 0.0))


def cssv(m_i, m_agg) -> float:
    """Mean per-class cosine between a client's update rows and the cohort's.

    The class vectors are the C rows of the C x d final-layer delta. Rows
    with vanishing norm contribute cosine 0.
    """
    a = linalg.as_matrix(m_i, "client update")
    b = linalg.as_matrix(m_agg, "aggregate update")
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean([linalg.cosine(a[j], b[j]) for j in range(a.shape[0])]))


def cgsv_score(update_i: LayerUpdate, update_avg: LayerUpdate) -> float:
    """Cosine between two fully flattened multi-layer updates."""
    if len(update_i.deltas) != len(update_avg.deltas):
        raise DimensionError("updates have different layer counts")
    for (dw_a, db_a), (dw_b, db_b) in zip(update_i.deltas, update_avg.deltas):
        if dw_a.shape != dw_b.shape or db_a.shape != db_b.shape:
            raise DimensionError(f"layer shape mismatch: {dw_a.shape} vs {dw_b.shape}")
    return linalg.cosine(update_i.flatten(), update_avg.flatten())


@dataclass
class ContributionState:
    """Per-client smoothed signals with a shared momentum factor.

    The first observation of each (client, signal) pair passes through
    unchanged; later observations apply the exponential moving average.
    """

    momentum: float
    entropy: np.ndarray
    cssv: np.ndarray
    cgsv: np.ndarray
    entropy_seen: np.ndarray
    cssv_seen: np.ndarray
    cgsv_seen: np.ndarray

    @classmethod
    def create(cls, n_clients: int, momentum: float) -> "ContributionState":
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"momentum must be in [0, 1), got {momentum}")
        if n_clients < 1:
            raise ContractError("need at least one client")
        zeros = lambda: np.zeros(n_clients)
        unseen = lambda: np.zeros(n_clients, dtype=bool)
        return cls(momentum, zeros(), zeros(), zeros(), unseen(), unseen(), unseen())

    def signal(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        if which not in SIGNAL_NAMES:
            raise ContractError(f"unknown signal {which!r}, expected one of {SIGNAL_NAMES}")
        return getattr(self, which), getattr(self, f"{which}_seen")


def ema_update(state: ContributionState, client: int, raw: float, which: str) -> float:
    """Fold one raw observation into the client's smoothed signal.

    Non-finite observations are rejected with a warning; the previous
    smoothed value is retained.
    """
    values, seen = state.signal(which)
    if not np.isfinite(raw):
        logger.warning("rejected non-finite %s observation %r for client %d", which, raw, client)
        return float(values[client]) if seen[client] else 0.0
    if seen[client]:
        values[client] = state.momentum * values[client] + (1.0 - state.momentum) * raw
    else:
        values[client] = raw
        seen[client] = True
    return float(values[client])


def normalize_scores(values, floor: float = DEFAULT_WEIGHT_FLOOR) -> np.ndarray:
    """Clamp scores to a positive floor and project onto the simplex.

    Total by design: an all-degenerate input (every entry at or below the
    floor) comes out uniform.
    """
    v = linalg.as_vector(values, "scores")
    if v.shape[0] < 1:
        raise DimensionError("cannot normalize an empty score vector")
    if floor <= 0.0:
        raise ContractError(f"floor must be positive, got {floor}")
    clamped = np.maximum(v, floor)
    return clamped / clamped.sum()
