"""Round-based federated protocol with six aggregation strategies.

Every round broadcasts the global model, trains all clients locally
(cross-silo: full participation), derives aggregation weights from the
strategy's scoring signals, and takes the convex combination of client
models. Standalone per-client baselines trained once per experiment give
the ground truth that round correlations are measured against.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import fusion, nn, scoring
from .data import (
    DataSpec,
    Dataset,
    PartitionKind,
    PartitionSpec,
    holdout_split,
    make_dataset,
    partition,
)
from .errors import ContractError, DimensionError
from .fusion import KalmanState
from .linalg import pearson, spearman
from .nn import LayerUpdate, ModelParams, TrainSpec
from .scoring import ContributionState, EntropyMode

_FREE_RIDER_STREAM = 13


class Strategy(Enum):
    FEDAVG_UNIFORM = "fedavg_uniform"
    FEDAVG_SAMPLES = "fedavg_samples"
    CGSV = "cgsv"
    SHAPFED = "shapfed"
    SPECTRALFED = "spectralfed"
    SPECTRALFUSE = "spectralfuse"


@dataclass(frozen=True)
class FederationConfig:
    """Everything needed to reproduce a run, flat and serializable."""

    n_clients: int = 5
    rounds: int = 50
    strategy: Strategy = Strategy.SPECTRALFED
    entropy_mode: EntropyMode = EntropyMode.TRACE
    momentum: float = 0.9
    process_noise: float = 1e-4
    noise_floor: float = 1e-3
    prior_variance: float = 0.1
    weight_floor: float = 1e-6
    seed: int = 0
    hidden_dims: tuple[int, ...] = (64,)
    local_epochs: int = 1
    batch_size: int = 64
    lr_initial: float = 0.1
    lr_final: float = 1e-6
    partition_kind: PartitionKind = PartitionKind.ONLY_LABEL_SKEW
    dirichlet_alpha: float | None = None
    data: DataSpec = field(default_factory=DataSpec)
    free_rider_client: int | None = None
    free_rider_pool: int | None = None

    def __post_init__(self):
        if self.n_clients < 2 or self.rounds < 1:
            raise ContractError("need n_clients >= 2 and rounds >= 1")
        if self.free_rider_client is not None and not 0 <= self.free_rider_client < self.n_clients:
            raise ContractError("free_rider_client must index an existing client")
        if any(d < 1 for d in self.hidden_dims):
            raise ContractError("hidden_dims must be positive")

    @property
    def train_spec(self) -> TrainSpec:
        return TrainSpec(
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            lr_initial=self.lr_initial,
            lr_final=self.lr_final,
            total_rounds=self.rounds,
            seed=self.seed,
        )

    @property
    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(
            kind=self.partition_kind,
            n_clients=self.n_clients,
            seed=self.seed,
            alpha=self.dirichlet_alpha,
        )

    def with_seed(self, seed: int) -> "FederationConfig":
        return replace(self, seed=seed)


@dataclass
class RoundRecord:
    """One round's scores, weights and evaluation metrics."""

    round_index: int
    weights: list[float]
    global_accuracy: float
    pearson_vs_standalone: float
    spearman_vs_standalone: float
    raw_entropy: list[float] | None = None
    smoothed_entropy: list[float] | None = None
    raw_cssv: list[float] | None = None
    smoothed_cssv: list[float] | None = None
    raw_cgsv: list[float] | None = None
    smoothed_cgsv: list[float] | None = None
    fused: list[float] | None = None

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "weights": self.weights,
            "global_accuracy": self.global_accuracy,
            "pearson_vs_standalone": self.pearson_vs_standalone,
            "spearman_vs_standalone": self.spearman_vs_standalone,
            "raw_entropy": self.raw_entropy,
            "smoothed_entropy": self.smoothed_entropy,
            "raw_cssv": self.raw_cssv,
            "smoothed_cssv": self.smoothed_cssv,
            "raw_cgsv": self.raw_cgsv,
            "smoothed_cgsv": self.smoothed_cgsv,
            "fused": self.fused,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        return cls(
            round_index=d["round"],
            weights=d["weights"],
            global_accuracy=d["global_accuracy"],
            pearson_vs_standalone=d["pearson_vs_standalone"],
            spearman_vs_standalone=d["spearman_vs_standalone"],
            raw_entropy=d["raw_entropy"],
            smoothed_entropy=d["smoothed_entropy"],
            raw_cssv=d["raw_cssv"],
            smoothed_cssv=d["smoothed_cssv"],
            raw_cgsv=d["raw_cgsv"],
            smoothed_cgsv=d["smoothed_cgsv"],
            fused=d["fused"],
        )


@dataclass
class ExperimentState:
    """Mutable cross-round state owned by the experiment controller."""

    round_index: int
    scores: ContributionState
    filter: KalmanState
    test: Dataset
    standalone_accuracy: np.ndarray
    timings: list[dict] = field(default_factory=list)


@dataclass
class RunLog:
    """Full output of one experiment."""

    records: list[RoundRecord]
    standalone_accuracy: list[float]
    final_accuracy: float
    timings: list[dict]


def aggregate(models: list[ModelParams], weights) -> ModelParams:
    """Convex combination of shape-identical models, in client-index order."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(models) == 0 or w.shape[0] != len(models):
        raise DimensionError("need one weight per model")
    if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-6:
        raise ContractError(f"weights are off the simplex: sum={w.sum()!r}, min={w.min()!r}")
    shapes = [(wm.shape, bm.shape) for wm, bm in models[0].layers]
    for m in models[1:]:
        if [(wm.shape, bm.shape) for wm, bm in m.layers] != shapes:
            raise DimensionError("models have mismatched layer shapes")
    layers = []
    for k in range(len(models[0].layers)):
        w_acc = np.zeros_like(models[0].layers[k][0])
        b_acc = np.zeros_like(models[0].layers[k][1])
        for i, m in enumerate(models):
            w_acc += w[i] * m.layers[k][0]
            b_acc += w[i] * m.layers[k][1]
        layers.append((w_acc, b_acc))
    return ModelParams(layers)


def make_free_rider(shard: Dataset, target_size: int, pool_size: int, seed: int) -> Dataset:
    """A shard of target_size built by duplicating a tiny genuine pool.

    Keeps pool_size real samples and pads with seeded draws (with
    replacement) from that pool, mimicking a participant that inflates its
    data size without contributing information.
    """
    if pool_size < 1 or target_size < pool_size:
        raise ContractError(f"need 1 <= pool_size <= target_size, got {pool_size}, {target_size}")
    if pool_size > len(shard):
        raise ContractError(f"pool_size {pool_size} exceeds shard size {len(shard)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _FREE_RIDER_STREAM]))
    pool = rng.choice(len(shard), size=pool_size, replace=False)
    dups = rng.choice(pool, size=target_size - pool_size, replace=True)
    return shard.subset(np.concatenate([pool, dups]))


def train_clients(config, global_model, shards, round_index, workers):
    spec = config.train_spec

    def train_one(i):
        return nn.train_local(global_model, shards[i], spec, round_index, client_id=i)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(train_one, range(config.n_clients)))
    else:
        results = [train_one(i) for i in range(config.n_clients)]
    return [r[0] for r in results], [r[1] for r in results]


def _mean_update(updates: list[LayerUpdate]) -> LayerUpdate:
    n = len(updates)
    deltas = []
    for k in range(len(updates[0].deltas)):
        dw = sum(u.deltas[k][0] for u in updates) / n
        db = sum(u.deltas[k][1] for u in updates) / n
        deltas.append((dw, db))
    return LayerUpdate(deltas)


def run_round(
    config: FederationConfig,
    global_model: ModelParams,
    shards: list[Dataset],
    state: ExperimentState,
    workers: int = 1,
) -> tuple[ModelParams, RoundRecord]:
    """Broadcast, train, score, weigh and aggregate one communication round.

    Only the signals the strategy needs are computed, so per-phase timings
    reflect each method's real server-side cost.
    """
    t = state.round_index
    if t > config.rounds:
        raise ContractError(f"round {t} exceeds configured total {config.rounds}")
    n = config.n_clients
    models, updates = train_clients(config, global_model, shards, t, workers)

    strategy = config.strategy
    needs_entropy = strategy in (Strategy.SPECTRALFED, Strategy.SPECTRALFUSE)
    needs_cssv = strategy in (Strategy.SHAPFED, Strategy.SPECTRALFUSE)
    needs_cgsv = strategy is Strategy.CGSV

    raw_entropy = smoothed_entropy = None
    raw_cssv = smoothed_cssv = None
    raw_cgsv = smoothed_cgsv = None
    fused = None

    scoring_start = time.perf_counter()
    if needs_entropy:
        raw_entropy = [
            scoring.spectral_entropy(u.final_layer_matrix(), config.entropy_mode)
            for u in updates
        ]
        smoothed_entropy = [
            scoring.ema_update(state.scores, i, raw_entropy[i], "entropy") for i in range(n)
        ]
    if needs_cssv:
        m_agg = sum(u.final_layer_matrix() for u in updates) / n
        raw_cssv = [scoring.cssv(u.final_layer_matrix(), m_agg) for u in updates]
        smoothed_cssv = [
            scoring.ema_update(state.scores, i, raw_cssv[i], "cssv") for i in range(n)
        ]
    if needs_cgsv:
        update_avg = _mean_update(updates)
        raw_cgsv = [scoring.cgsv_score(u, update_avg) for u in updates]
        smoothed_cgsv = [
            scoring.ema_update(state.scores, i, raw_cgsv[i], "cgsv") for i in range(n)
        ]

    if strategy is Strategy.FEDAVG_UNIFORM:
        weights = np.full(n, 1.0 / n)
    elif strategy is Strategy.FEDAVG_SAMPLES:
        sizes = np.array([len(s) for s in shards], dtype=np.float64)
        weights = sizes / sizes.sum()
    elif strategy is Strategy.SPECTRALFED:
        weights = scoring.normalize_scores(smoothed_entropy, config.weight_floor)
    elif strategy is Strategy.SHAPFED:
        weights = scoring.normalize_scores(smoothed_cssv, config.weight_floor)
    elif strategy is Strategy.CGSV:
        weights = scoring.normalize_scores(smoothed_cgsv, config.weight_floor)
    else:
        weights = None  # SPECTRALFUSE: derived in the fusion phase
    scoring_ms = 1e3 * (time.perf_counter() - scoring_start)

    fusion_ms = 0.0
    if strategy is Strategy.SPECTRALFUSE:
        fusion_start = time.perf_counter()
        s_obs = scoring.normalize_scores(smoothed_entropy, config.weight_floor)
        g_obs = scoring.normalize_scores(smoothed_cssv, config.weight_floor)
        fused_arr = fusion.filter_step(state.filter, s_obs, g_obs)
        weights = scoring.normalize_scores(fused_arr, config.weight_floor)
        fused = [float(x) for x in fused_arr]
        fusion_ms = 1e3 * (time.perf_counter() - fusion_start)

    aggregation_start = time.perf_counter()
    new_global = aggregate(models, weights)
    aggregation_ms = 1e3 * (time.perf_counter() - aggregation_start)

    record = RoundRecord(
        round_index=t,
        weights=[float(x) for x in weights],
        global_accuracy=nn.evaluate(new_global, state.test),
        pearson_vs_standalone=pearson(weights, state.standalone_accuracy),
        spearman_vs_standalone=spearman(weights, state.standalone_accuracy),
        raw_entropy=raw_entropy,
        smoothed_entropy=smoothed_entropy,
        raw_cssv=raw_cssv,
        smoothed_cssv=smoothed_cssv,
        raw_cgsv=raw_cgsv,
        smoothed_cgsv=smoothed_cgsv,
        fused=fused,
    )
    state.timings.append(
        {"scoring_ms": scoring_ms, "fusion_ms": fusion_ms, "aggregation_ms": aggregation_ms}
    )
    state.round_index += 1
    return new_global, record


def build_shards(config: FederationConfig) -> tuple[list[Dataset], Dataset]:
    """Materialize the shards and shared test set a config describes."""
    ds = make_dataset(config.data, config.seed)
    train, test = holdout_split(ds, config.data.test_fraction, config.seed)
    shards = partition(train, config.partition_spec)
    return shards, test


def _inject_free_rider(config: FederationConfig, shards: list[Dataset]) -> list[Dataset]:
    idx = config.free_rider_client
    sizes = [len(s) for s in shards]
    target = max(1, int(round(np.mean(sizes))))
    pool = config.free_rider_pool
    if pool is None:
        pool = max(1, int(round(0.01 * np.mean(sizes))))
    pool = min(pool, len(shards[idx]))
    target = max(target, pool)
    out = list(shards)
    out[idx] = make_free_rider(shards[idx], target, pool, config.seed)
    return out


def train_standalone(
    config: FederationConfig, shards: list[Dataset], test: Dataset, initial: ModelParams
) -> list[float]:
    """Each client trains alone for the full horizon with the shared spec."""
    spec = config.train_spec
    accs = []
    for i, shard in enumerate(shards):
        params = initial.copy()
        for t in range(1, config.rounds + 1):
            params, _, _ = nn.train_local(params, shard, spec, t, client_id=i)
        accs.append(nn.evaluate(params, test))
    return accs


def run_experiment(
    config: FederationConfig,
    shards: list[Dataset] | None = None,
    test: Dataset | None = None,
    workers: int = 1,
) -> RunLog:
    """Run the configured federation end to end.

    Prebuilt shards and test set may be injected for custom studies;
    otherwise both come from the config's data block. The log is a pure
    function of (config, shards, test), independent of the worker count.
    """
    if shards is None:
        shards, test = build_shards(config)
    elif test is None:
        raise ContractError("prebuilt shards need an explicit test set")
    if len(shards) != config.n_clients:
        raise DimensionError(f"{len(shards)} shards for {config.n_clients} clients")
    if config.free_rider_client is not None:
        shards = _inject_free_rider(config, shards)

    feature_dim = shards[0].features.shape[1]
    num_classes = shards[0].num_classes
    layer_dims = [feature_dim, *config.hidden_dims, num_classes]
    initial = nn.init_params(layer_dims, config.seed)

    standalone = train_standalone(config, shards, test, initial)
    state = ExperimentState(
        round_index=1,
        scores=ContributionState.create(config.n_clients, config.momentum),
        filter=KalmanState.create(
            config.n_clients,
            process_noise=config.process_noise,
            noise_floor=config.noise_floor,
            prior_variance=config.prior_variance,
        ),
        test=test,
        standalone_accuracy=np.asarray(standalone),
    )

    global_model = initial.copy()
    records = []
    for _ in range(config.rounds):
        global_model, record = run_round(config, global_model, shards, state, workers)
        records.append(record)
    return RunLog(
        records=records,
        standalone_accuracy=[float(a) for a in standalone],
        final_accuracy=records[-1].global_accuracy,
        timings=state.timings,
    )
