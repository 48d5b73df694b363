"""Command-line entry point, config parsing, run persistence, exports.

Configs are flat key = value text files (dotted keys for nested blocks).
Runs write one JSON object per round to rounds.jsonl plus CSV summaries;
everything except the manifest's timestamps and timings is byte-stable
across reruns of the same config.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .analysis import (
    detection_rate,
    layerwise_entropy_study,
    quarter_intervals,
    sweep,
)
from .data import DataSpec, PartitionKind
from .errors import ConfigError, FedSpectralError, InsufficientDataError
from .federation import FederationConfig, RoundRecord, RunLog, Strategy, run_experiment
from .scoring import EntropyMode

OUT_DIR_ENV = "FEDSPECTRAL_OUT"
DEFAULT_OUT_DIR = "runs"

DEFAULT_SWEEP_Q = [1e-6, 1e-4, 1e-2]
DEFAULT_SWEEP_EPS = [1e-4, 1e-3, 1e-2]


def _parse_bool(raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes"):
        return True
    if raw.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(p.strip()) for p in raw.split(",") if p.strip())


def _parse_float_list(raw: str) -> tuple[float, ...]:
    return tuple(float(p.strip()) for p in raw.split(",") if p.strip())


# key -> parser; every key a config file may contain.
_SCHEMA = {
    "seed": int,
    "n_clients": int,
    "rounds": int,
    "strategy": Strategy,
    "entropy_mode": EntropyMode,
    "momentum": float,
    "process_noise": float,
    "noise_floor": float,
    "prior_variance": float,
    "weight_floor": float,
    "hidden_dims": _parse_int_list,
    "local_epochs": int,
    "batch_size": int,
    "lr_initial": float,
    "lr_final": float,
    "partition.kind": PartitionKind,
    "partition.alpha": float,
    "data.classes": int,
    "data.features": int,
    "data.per_class": int,
    "data.separation": float,
    "data.test_fraction": float,
    "data.images": str,
    "data.labels": str,
    "free_rider.client": int,
    "free_rider.pool": int,
    "sweep.q": _parse_float_list,
    "sweep.epsilon": _parse_float_list,
}


def _read_flat(path: str) -> dict[str, str]:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    flat: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
            key, _, value = stripped.partition("=")
            key = key.strip()
            if key in flat:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            flat[key] = value.strip()
    return flat


def parse_flat(flat: dict[str, str]) -> FederationConfig:
    """Validate a flat key/value mapping and build the run configuration."""
    parsed: dict[str, object] = {}
    for key, raw in flat.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = _SCHEMA[key]
        try:
            if isinstance(parser, type) and issubclass(parser, (Strategy, EntropyMode, PartitionKind)):
                parsed[key] = parser(raw)
            else:
                parsed[key] = parser(raw)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"invalid value for {key!r}: {raw!r} ({exc})") from exc

    data_kwargs = {}
    for key, field_name in (
        ("data.classes", "classes"),
        ("data.features", "features"),
        ("data.per_class", "per_class"),
        ("data.separation", "separation"),
        ("data.test_fraction", "test_fraction"),
        ("data.images", "images"),
        ("data.labels", "labels"),
    ):
        if key in parsed:
            data_kwargs[field_name] = parsed[key]

    config_kwargs = {
        name: parsed[name]
        for name in (
            "seed",
            "n_clients",
            "rounds",
            "strategy",
            "entropy_mode",
            "momentum",
            "process_noise",
            "noise_floor",
            "prior_variance",
            "weight_floor",
            "hidden_dims",
            "local_epochs",
            "batch_size",
            "lr_initial",
            "lr_final",
        )
        if name in parsed
    }
    if "partition.kind" in parsed:
        config_kwargs["partition_kind"] = parsed["partition.kind"]
    if "partition.alpha" in parsed:
        config_kwargs["dirichlet_alpha"] = parsed["partition.alpha"]
    if "free_rider.client" in parsed:
        config_kwargs["free_rider_client"] = parsed["free_rider.client"]
    if "free_rider.pool" in parsed:
        config_kwargs["free_rider_pool"] = parsed["free_rider.pool"]
    if data_kwargs:
        config_kwargs["data"] = DataSpec(**data_kwargs)
    try:
        return FederationConfig(**config_kwargs)
    except FedSpectralError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(path: str) -> FederationConfig:
    """Read and validate a config file; unknown keys are rejected by name."""
    return parse_flat(_read_flat(path))


def sweep_axes(path: str) -> tuple[list[float], list[float]]:
    """The (Q, epsilon) grid a config requests, with the standard default."""
    flat = _read_flat(path)
    q = list(_parse_float_list(flat["sweep.q"])) if "sweep.q" in flat else list(DEFAULT_SWEEP_Q)
    eps = (
        list(_parse_float_list(flat["sweep.epsilon"]))
        if "sweep.epsilon" in flat
        else list(DEFAULT_SWEEP_EPS)
    )
    return q, eps


def config_to_flat(config: FederationConfig) -> dict[str, str]:
    """Flat text form of a config; parse_flat inverts this losslessly."""
    flat = {
        "seed": str(config.seed),
        "n_clients": str(config.n_clients),
        "rounds": str(config.rounds),
        "strategy": config.strategy.value,
        "entropy_mode": config.entropy_mode.value,
        "momentum": repr(config.momentum),
        "process_noise": repr(config.process_noise),
        "noise_floor": repr(config.noise_floor),
        "prior_variance": repr(config.prior_variance),
        "weight_floor": repr(config.weight_floor),
        "hidden_dims": ",".join(str(d) for d in config.hidden_dims),
        "local_epochs": str(config.local_epochs),
        "batch_size": str(config.batch_size),
        "lr_initial": repr(config.lr_initial),
        "lr_final": repr(config.lr_final),
        "partition.kind": config.partition_kind.value,
        "data.classes": str(config.data.classes),
        "data.features": str(config.data.features),
        "data.per_class": str(config.data.per_class),
        "data.separation": repr(config.data.separation),
        "data.test_fraction": repr(config.data.test_fraction),
    }
    if config.dirichlet_alpha is not None:
        flat["partition.alpha"] = repr(config.dirichlet_alpha)
    if config.data.images is not None:
        flat["data.images"] = config.data.images
        flat["data.labels"] = config.data.labels
    if config.free_rider_client is not None:
        flat["free_rider.client"] = str(config.free_rider_client)
    if config.free_rider_pool is not None:
        flat["free_rider.pool"] = str(config.free_rider_pool)
    return flat


def serialize_config(config: FederationConfig) -> str:
    flat = config_to_flat(config)
    return "".join(f"{key} = {flat[key]}\n" for key in sorted(flat))


def timing_report(log: RunLog) -> dict[str, tuple[float, float]]:
    """Mean and std of the per-round server-side phase times, milliseconds."""
    if len(log.timings) < 2:
        raise InsufficientDataError("timing report needs at least 2 rounds")
    report = {}
    for phase in ("scoring_ms", "fusion_ms", "aggregation_ms"):
        values = np.array([t[phase] for t in log.timings])
        report[phase.removesuffix("_ms")] = (float(values.mean()), float(values.std()))
    return report


def _seed_suffix(seed: int, multi: bool) -> str:
    return f"_seed{seed}" if multi else ""


def _write_rounds_jsonl(path: str, records: list[RoundRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec.to_dict()) + "\n")


def _write_summary_csv(path: str, log: RunLog) -> None:
    n = len(log.records[0].weights)
    header = ["round"] + [f"weight_{i + 1}" for i in range(n)] + [
        "pearson",
        "spearman",
        "global_acc",
    ]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for rec in log.records:
            writer.writerow(
                [rec.round_index]
                + [repr(w) for w in rec.weights]
                + [
                    repr(rec.pearson_vs_standalone),
                    repr(rec.spearman_vs_standalone),
                    repr(rec.global_accuracy),
                ]
            )


def _write_manifest(out_dir, config, seeds, outputs, timings_by_seed, started_at):
    manifest = {
        "tool_version": __version__,
        "config": config_to_flat(config),
        "seeds": seeds,
        "outputs": outputs,
        "started_at": started_at,
        "finished_at": time.time() if timings_by_seed else None,
        "round_timings_ms": timings_by_seed,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def run_command(
    subcommand: str,
    config: FederationConfig,
    out_dir: str,
    seeds: list[int] | None = None,
    workers: int = 1,
    q_values: list[float] | None = None,
    eps_values: list[float] | None = None,
) -> int:
    """Execute one subcommand and persist its outputs; 0 on success."""
    if subcommand not in ("run", "sweep", "freerider", "layerwise"):
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    seeds = list(seeds) if seeds else [config.seed]
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write_probe")
        with open(probe, "w") as f:
            f.write("")
        os.remove(probe)
    except OSError as exc:
        print(f"error: output directory not writable: {exc}", file=sys.stderr)
        return 1

    try:
        multi = len(seeds) > 1
        outputs: list[str] = []
        timings_by_seed: dict[str, list[dict]] = {}
        started_at = time.time()
        _write_manifest(out_dir, config, seeds, outputs, {}, started_at)

        if subcommand == "run":
            for seed in seeds:
                log = run_experiment(config.with_seed(seed), workers=workers)
                rounds_path = os.path.join(out_dir, f"rounds{_seed_suffix(seed, multi)}.jsonl")
                summary_path = os.path.join(out_dir, f"summary{_seed_suffix(seed, multi)}.csv")
                _write_rounds_jsonl(rounds_path, log.records)
                _write_summary_csv(summary_path, log)
                outputs.extend([rounds_path, summary_path])
                timings_by_seed[str(seed)] = log.timings

        elif subcommand == "sweep":
            grid = sweep(
                config,
                q_values or DEFAULT_SWEEP_Q,
                eps_values or DEFAULT_SWEEP_EPS,
                seeds,
                workers=workers,
            )
            grid_path = os.path.join(out_dir, "grid.csv")
            with open(grid_path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(["q", "epsilon", "mean_pearson", "seed_count"])
                for qi, q in enumerate(grid.q_values):
                    for ei, eps in enumerate(grid.eps_values):
                        writer.writerow([repr(q), repr(eps), repr(float(grid.cells[qi, ei])), grid.seed_count])
            outputs.append(grid_path)

        elif subcommand == "freerider":
            cfg = config
            if cfg.free_rider_client is None:
                cfg = replace(cfg, free_rider_client=cfg.n_clients - 1)
            detection_path = os.path.join(out_dir, "detection.csv")
            with open(detection_path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(
                    ["seed", "interval_start", "interval_end", "client", "flag_rate", "is_free_rider"]
                )
                for seed in seeds:
                    log = run_experiment(cfg.with_seed(seed), workers=workers)
                    intervals = quarter_intervals(cfg.rounds)
                    for det in detection_rate(log.records, cfg.free_rider_client, intervals):
                        for client, rate in enumerate(det.flag_rates):
                            writer.writerow(
                                [
                                    seed,
                                    det.round_start,
                                    det.round_end,
                                    client,
                                    repr(rate),
                                    int(client == cfg.free_rider_client),
                                ]
                            )
                    timings_by_seed[str(seed)] = log.timings
            outputs.append(detection_path)

        elif subcommand == "layerwise":
            layers_path = os.path.join(out_dir, "layers.csv")
            with open(layers_path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(["seed", "layer", "mean_pearson"])
                for seed in seeds:
                    means = layerwise_entropy_study(config.with_seed(seed), workers=workers)
                    for layer, value in enumerate(means):
                        writer.writerow([seed, layer, repr(value)])
            outputs.append(layers_path)

        _write_manifest(out_dir, config, seeds, outputs, timings_by_seed, started_at)
    except FedSpectralError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    for path in outputs:
        if not os.path.isfile(path) or os.path.getsize(path) == 0:
            print(f"error: expected non-empty output {path}", file=sys.stderr)
            return 1
    return 0


def _parse_seeds(raw: str | None) -> list[int] | None:
    if raw is None:
        return None
    try:
        seeds = [int(p.strip()) for p in raw.split(",") if p.strip()]
    except ValueError as exc:
        raise ConfigError(f"invalid --seeds value {raw!r}") from exc
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    return seeds


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedspectral",
        description="Deterministic federated-learning simulator with data-free client scoring",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, help_text in (
        ("run", "run one experiment and write rounds.jsonl + summary.csv"),
        ("sweep", "run the process-noise/variance-floor grid and write grid.csv"),
        ("freerider", "inject a free-rider client and write detection.csv"),
        ("layerwise", "per-layer entropy correlation study, writes layers.csv"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to a flat key = value config file")
        p.add_argument(
            "--out",
            default=None,
            help=f"output directory (default: ${OUT_DIR_ENV} or ./{DEFAULT_OUT_DIR})",
        )
        p.add_argument("--seeds", default=None, help="comma-separated seed list, e.g. 1,2,3")
        p.add_argument("--workers", type=int, default=1, help="concurrent client training workers")

    args = parser.parse_args(argv)
    out_dir = args.out or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR
    try:
        config = parse_config(args.config)
        seeds = _parse_seeds(args.seeds)
        q_values = eps_values = None
        if args.subcommand == "sweep":
            q_values, eps_values = sweep_axes(args.config)
        return run_command(
            args.subcommand,
            config,
            out_dir,
            seeds=seeds,
            workers=args.workers,
            q_values=q_values,
            eps_values=eps_values,
        )
    except FedSpectralError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
