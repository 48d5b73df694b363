"""Post-hoc and in-run analytics.

Free-rider flagging from compositional weights, detection-rate summaries
over round intervals, a per-layer entropy correlation study, and the
process-noise/variance-floor sensitivity grid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn, scoring
from .errors import ContractError, InsufficientDataError
from .federation import (
    train_clients,
    ExperimentState,
    FederationConfig,
    RoundRecord,
    Strategy,
    aggregate,
    build_shards,
    run_experiment,
    train_standalone,
)
from .fusion import KalmanState
from .linalg import as_vector, median_mad, pearson
from .scoring import ContributionState

DEFAULT_FLAG_THRESHOLD = 2.5


@dataclass
class FreeRiderReport:
    """Robust z-scores of log-ratio weights with low-tail flags."""

    clr: list[float]
    zscores: list[float]
    flagged: list[bool]
    threshold: float


def detect_free_riders(weights, threshold: float = DEFAULT_FLAG_THRESHOLD) -> FreeRiderReport:
    """Flag clients whose weight is a robust low outlier.

    Weights are mapped off the simplex with the centered log-ratio, then
    scored as (y - median) / MAD. When the MAD degenerates to zero (tied
    central values) the mean absolute deviation from the median takes over;
    if that is zero too the weights are uniform and nothing is flagged.
    Only the low tail is flagged: free-riders under-contribute.
    """
    w = as_vector(weights, "weights")
    if w.shape[0] < 3:
        raise InsufficientDataError("outlier detection needs at least 3 clients")
    if np.any(w <= 0.0):
        raise ContractError("weights must be strictly positive (floor-clamped upstream)")
    y = np.log(w)
    y = y - y.mean()
    med, mad = median_mad(y)
    scale = mad if mad > 0.0 else float(np.mean(np.abs(y - med)))
    if scale == 0.0:
        z = np.zeros_like(y)
        flagged = np.zeros(y.shape[0], dtype=bool)
    else:
        z = (y - med) / scale
        flagged = z < -threshold
    return FreeRiderReport(
        clr=[float(v) for v in y],
        zscores=[float(v) for v in z],
        flagged=[bool(f) for f in flagged],
        threshold=threshold,
    )


@dataclass
class IntervalDetection:
    """Per-client flag rates over an inclusive round interval."""

    round_start: int
    round_end: int
    free_rider: int
    flag_rates: list[float]

    @property
    def true_positive_rate(self) -> float:
        return self.flag_rates[self.free_rider]

    @property
    def false_positive_rates(self) -> list[float]:
        return [r for i, r in enumerate(self.flag_rates) if i != self.free_rider]


def detection_rate(
    records: list[RoundRecord],
    free_rider: int,
    intervals: list[tuple[int, int]],
    threshold: float = DEFAULT_FLAG_THRESHOLD,
) -> list[IntervalDetection]:
    """Flag-rate summary of a run log over the requested round intervals."""
    if not records:
        raise InsufficientDataError("empty run log")
    lo = records[0].round_index
    hi = records[-1].round_index
    by_round = {rec.round_index: rec for rec in records}
    out = []
    for start, end in intervals:
        if start > end or start < lo or end > hi:
            raise ContractError(f"interval [{start}, {end}] outside the log's rounds [{lo}, {hi}]")
        n_clients = len(records[0].weights)
        counts = np.zeros(n_clients)
        span = 0
        for t in range(start, end + 1):
            rec = by_round[t]
            report = detect_free_riders(rec.weights, threshold)
            counts += np.asarray(report.flagged, dtype=float)
            span += 1
        out.append(
            IntervalDetection(
                round_start=start,
                round_end=end,
                free_rider=free_rider,
                flag_rates=[float(c / span) for c in counts],
            )
        )
    return out


def quarter_intervals(rounds: int) -> list[tuple[int, int]]:
    """Four contiguous intervals covering [1, rounds]."""
    edges = [1 + (rounds * k) // 4 for k in range(4)] + [rounds + 1]
    return [(edges[k], edges[k + 1] - 1) for k in range(4)]


def layerwise_entropy_study(
    config: FederationConfig, shards=None, test=None, workers: int = 1
) -> list[float]:
    """Mean per-layer correlation of normalized layer entropies with standalone accuracy.

    Runs one entropy-weighted federation, scoring every layer's weight-delta
    spectrum per round (biases excluded: their rank-one spectra carry no
    spread). With a single layer this reduces to the entropy strategy's own
    per-round correlation trajectory.
    """
    if shards is None:
        shards, test = build_shards(config)
    elif test is None:
        raise ContractError("prebuilt shards need an explicit test set")
    n = config.n_clients
    feature_dim = shards[0].features.shape[1]
    layer_dims = [feature_dim, *config.hidden_dims, shards[0].num_classes]
    initial = nn.init_params(layer_dims, config.seed)
    standalone = np.asarray(train_standalone(config, shards, test, initial))

    n_layers = len(initial.layers)
    states = [ContributionState.create(n, config.momentum) for _ in range(n_layers)]
    per_round = np.zeros((config.rounds, n_layers))
    global_model = initial.copy()
    for t in range(1, config.rounds + 1):
        models, updates = train_clients(config, global_model, shards, t, workers)
        weights = None
        for layer in range(n_layers):
            raw = [
                scoring.spectral_entropy(u.deltas[layer][0], config.entropy_mode)
                for u in updates
            ]
            smoothed = [
                scoring.ema_update(states[layer], i, raw[i], "entropy") for i in range(n)
            ]
            normalized = scoring.normalize_scores(smoothed, config.weight_floor)
            per_round[t - 1, layer] = pearson(normalized, standalone)
            if layer == n_layers - 1:
                weights = normalized
        global_model = aggregate(models, weights)
    return [float(v) for v in per_round.mean(axis=0)]


@dataclass
class SweepGrid:
    """Mean correlation per (process noise, variance floor) cell."""

    q_values: list[float]
    eps_values: list[float]
    cells: np.ndarray
    seed_count: int


def final_quarter_pearson(records: list[RoundRecord]) -> float:
    """Mean weight/standalone correlation over the last quarter of rounds."""
    start = (3 * len(records)) // 4
    return float(np.mean([rec.pearson_vs_standalone for rec in records[start:]]))


def sweep(
    config: FederationConfig,
    q_values: list[float],
    eps_values: list[float],
    seeds: list[int],
    workers: int = 1,
) -> SweepGrid:
    """Run the experiment grid over filter hyperparameters.

    Cells differ only in (Q, eps); each cell averages the final-quarter
    correlation over the given seeds.
    """
    if not q_values or not eps_values or not seeds:
        raise ContractError("sweep axes and seed list must be non-empty")
    cells = np.zeros((len(q_values), len(eps_values)))
    for qi, q in enumerate(q_values):
        for ei, eps in enumerate(eps_values):
            vals = []
            for seed in seeds:
                cfg = replace(config, process_noise=q, noise_floor=eps, seed=seed)
                log = run_experiment(cfg, workers=workers)
                vals.append(final_quarter_pearson(log.records))
            cells[qi, ei] = float(np.mean(vals))
    return SweepGrid(
        q_values=[float(q) for q in q_values],
        eps_values=[float(e) for e in eps_values],
        cells=cells,
        seed_count=len(seeds),
    )
