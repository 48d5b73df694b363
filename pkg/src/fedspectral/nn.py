"""Minimal multilayer-perceptron training engine.

Plain SGD on softmax cross-entropy, ReLU hidden layers, linear output.
Training is deterministic: every (seed, client, round) triple owns its own
PRNG stream, so clients can train concurrently without sharing state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ContractError, DimensionError, InsufficientDataError

# Stream tags keep the init / training RNG streams disjoint for equal seeds.
_INIT_STREAM = 0
_TRAIN_STREAM = 1


@dataclass
class ModelParams:
    """Ordered (weight, bias) pairs; weight is out x in, bias is length out."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        for k, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise DimensionError(f"layer {k} has inconsistent shapes {w.shape} / {b.shape}")
            if k > 0 and w.shape[1] != self.layers[k - 1][0].shape[0]:
                raise DimensionError(
                    f"layer {k} input dim {w.shape[1]} does not chain with "
                    f"previous output dim {self.layers[k - 1][0].shape[0]}"
                )

    @property
    def layer_dims(self) -> list[int]:
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams([(w.copy(), b.copy()) for w, b in self.layers])


@dataclass(frozen=True)
class TrainSpec:
    """Local-training hyperparameters shared by all clients of a run."""

    local_epochs: int
    batch_size: int
    lr_initial: float
    lr_final: float
    total_rounds: int
    seed: int

    def __post_init__(self):
        if self.local_epochs < 1 or self.batch_size < 1 or self.total_rounds < 1:
            raise ContractError("epochs, batch size and rounds must be positive")
        if self.lr_initial <= 0.0 or self.lr_final < 0.0 or self.lr_final > self.lr_initial:
            raise ContractError("need 0 <= lr_final <= lr_initial with lr_initial > 0")
        if self.seed < 0:
            raise ContractError("seed must be a non-negative integer")


@dataclass
class LayerUpdate:
    """Per-layer parameter deltas, sign convention after - before."""

    deltas: list[tuple[np.ndarray, np.ndarray]]

    def final_layer_matrix(self) -> np.ndarray:
        """The C x d weight delta of the output layer (biases excluded)."""
        return self.deltas[-1][0]

    def flatten(self) -> np.ndarray:
        """All deltas concatenated into one vector, layer order, weights then bias."""
        parts = []
        for dw, db in self.deltas:
            parts.append(dw.ravel())
            parts.append(db.ravel())
        return np.concatenate(parts)


def init_params(layer_dims: list[int], seed: int) -> ModelParams:
    """Fresh parameters, each layer uniform in +-1/sqrt(fan_in)."""
    if len(layer_dims) < 2 or any(d < 1 for d in layer_dims):
        raise DimensionError(f"need at least input and output dims, got {layer_dims}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _INIT_STREAM]))
    layers = []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        lim = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-lim, lim, size=(fan_out, fan_in))
        b = rng.uniform(-lim, lim, size=fan_out)
        layers.append((w, b))
    return ModelParams(layers)


def _forward_cached(params: ModelParams, x: np.ndarray):
    """Activations for a batch; returns (scores, per-layer inputs, pre-activations)."""
    inputs = []
    preacts = []
    a = x
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        inputs.append(a)
        z = a @ w.T + b
        preacts.append(z)
        a = z if k == last else np.maximum(z, 0.0)
    return a, inputs, preacts


def forward(params: ModelParams, x) -> np.ndarray:
    """Class scores for one feature vector or a batch of them.

    Hidden layers apply ReLU; the output layer is linear (softmax lives in
    the loss).
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    batch = arr.reshape(1, -1) if single else arr
    expected = params.layers[0][0].shape[1]
    if batch.shape[1] != expected:
        raise DimensionError(f"input dim {batch.shape[1]} does not match model input {expected}")
    scores, _, _ = _forward_cached(params, batch)
    return scores[0] if single else scores


def loss_and_gradients(params: ModelParams, x: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy over a batch and its parameter gradients."""
    scores, inputs, preacts = _forward_cached(params, x)
    n = scores.shape[0]
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(n), y]))

    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)
    for k in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[k]
        grads[k] = (delta.T @ inputs[k], delta.sum(axis=0))
        if k > 0:
            delta = (delta @ w) * (preacts[k - 1] > 0.0)
    return loss, grads


def lr_schedule(spec: TrainSpec, round_index: int) -> float:
    """Cosine-annealed learning rate for 1-based round indices."""
    if round_index < 1 or round_index > spec.total_rounds:
        raise ContractError(f"round {round_index} outside [1, {spec.total_rounds}]")
    if spec.total_rounds == 1:
        return spec.lr_initial
    phase = math.pi * (round_index - 1) / (spec.total_rounds - 1)
    return spec.lr_final + 0.5 * (spec.lr_initial - spec.lr_final) * (1.0 + math.cos(phase))


def train_local(
    params: ModelParams,
    shard: Dataset,
    spec: TrainSpec,
    round_index: int,
    client_id: int = 0,
) -> tuple[ModelParams, LayerUpdate, float]:
    """One local pass: spec.local_epochs epochs of minibatch SGD on the shard.

    Returns the new parameters, the per-layer delta (after - before) and the
    mean minibatch loss of the pass. A client with no data must be modeled
    as a free-rider shard, never as an empty one.
    """
    if len(shard) == 0:
        raise InsufficientDataError("cannot train on an empty shard")
    lr = lr_schedule(spec, round_index)
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, _TRAIN_STREAM, client_id, round_index])
    )
    current = params.copy()
    losses = []
    n = len(shard)
    for _ in range(spec.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, spec.batch_size):
            idx = order[start : start + spec.batch_size]
            loss, grads = loss_and_gradients(current, shard.features[idx], shard.labels[idx])
            losses.append(loss)
            for (w, b), (dw, db) in zip(current.layers, grads):
                w -= lr * dw
                b -= lr * db
    deltas = [
        (wn - wo, bn - bo) for (wn, bn), (wo, bo) in zip(current.layers, params.layers)
    ]
    return current, LayerUpdate(deltas), float(np.mean(losses))


def evaluate(params: ModelParams, test: Dataset) -> float:
    """Fraction of argmax-correct predictions; ties break to the lowest class."""
    if len(test) == 0:
        raise InsufficientDataError("cannot evaluate on an empty test set")
    scores = forward(params, test.features)
    preds = np.argmax(scores, axis=1)
    return float(np.mean(preds == test.labels))
