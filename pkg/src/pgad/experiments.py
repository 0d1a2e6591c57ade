"""Ablations and hyperparameter sweeps over the full train-score pipeline.

Each cell trains from scratch on the clean series and scores the labeled
continuation; results are F1 values averaged over seeds. Cells are
independent, so they can optionally run in a process pool without
changing any result.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor

from .checkpoint import checkpoint_from_result
from .data import SeriesMatrix
from .errors import ConfigError
from .scoring import score_series
from .training import TrainConfig, train

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("full", "static_graph", "no_temporal")
SWEEP_AXES = ("neighbors", "filters")
NEIGHBOR_SWEEP_DEFAULT = (10, 15, 20, 25, 30, 35, 40)
FILTER_SWEEP_DEFAULT = (4, 8, 16, 32, 64, 128)


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    """Ablation variants: drop per-phase graphs, or drop the temporal branch."""
    if variant == "full":
        return base
    if variant == "static_graph":
        return dataclasses.replace(base, slots=1)
    if variant == "no_temporal":
        return dataclasses.replace(base, use_temporal=False)
    raise ConfigError(f"unknown ablation variant {variant!r}")


def axis_config(base: TrainConfig, axis: str, value: int) -> TrainConfig:
    """Sweep axes: neighbor budget k, or feature width (conv channels
    and attention output together)."""
    if axis == "neighbors":
        return dataclasses.replace(base, neighbors=int(value))
    if axis == "filters":
        return dataclasses.replace(base, channels=int(value), spatial_dim=int(value))
    raise ConfigError(f"unknown sweep axis {axis!r}")


def train_and_score(
    train_series: SeriesMatrix,
    test_series: SeriesMatrix,
    config: TrainConfig,
    *,
    ma_window: int = 3,
    threshold_mode: str = "best_f1",
    fixed_value: float | None = None,
    point_adjust: bool = False,
) -> dict:
    """One full pipeline run; returns the detection metrics as a dict."""
    result = train(train_series, config)
    ckpt = checkpoint_from_result(result, train_series.sensor_names)
    _, metrics = score_series(
        ckpt, test_series,
        ma_window=ma_window, threshold_mode=threshold_mode,
        fixed_value=fixed_value, point_adjust=point_adjust,
    )
    if metrics is None:
        raise ConfigError("experiment scoring needs labeled test data")
    return {
        "f1": metrics.f1,
        "precision": metrics.precision,
        "recall": metrics.recall,
        "threshold": metrics.threshold,
        "seed": config.seed,
        "best_epoch": result.report.best_epoch,
        "best_val_loss": result.report.best_val_loss,
    }


def _run_cell(args):
    train_series, test_series, config, score_kwargs = args
    return train_and_score(train_series, test_series, config, **score_kwargs)


def _run_cells(jobs, workers: int):
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell, jobs))
    return [_run_cell(job) for job in jobs]


def ablation_f1s(
    train_series: SeriesMatrix,
    test_series: SeriesMatrix,
    base_config: TrainConfig,
    *,
    seeds: tuple[int, ...] = (0,),
    variants: tuple[str, ...] = ABLATION_VARIANTS,
    workers: int = 1,
    **score_kwargs,
) -> dict[str, dict]:
    """F1 per ablation variant, averaged over seeds."""
    for variant in variants:
        variant_config(base_config, variant)
    jobs = [
        (train_series, test_series,
         dataclasses.replace(variant_config(base_config, variant), seed=seed),
         score_kwargs)
        for variant in variants
        for seed in seeds
    ]
    cells = _run_cells(jobs, workers)
    table: dict[str, dict] = {}
    i = 0
    for variant in variants:
        per_seed = cells[i : i + len(seeds)]
        i += len(seeds)
        mean_f1 = sum(c["f1"] for c in per_seed) / len(per_seed)
        table[variant] = {"mean_f1": mean_f1, "per_seed": per_seed}
        log.info("ablation %s: mean F1 %.4f", variant, mean_f1)
    return table


def sweep_f1s(
    train_series: SeriesMatrix,
    test_series: SeriesMatrix,
    base_config: TrainConfig,
    axis: str,
    values: tuple[int, ...],
    *,
    seeds: tuple[int, ...] = (0,),
    workers: int = 1,
    **score_kwargs,
) -> list[dict]:
    """F1 per swept value, averaged over seeds; rows keep sweep order."""
    if not values:
        raise ConfigError("sweep needs at least one value")
    jobs = [
        (train_series, test_series,
         dataclasses.replace(axis_config(base_config, axis, value), seed=seed),
         score_kwargs)
        for value in values
        for seed in seeds
    ]
    cells = _run_cells(jobs, workers)
    rows = []
    i = 0
    for value in values:
        per_seed = cells[i : i + len(seeds)]
        i += len(seeds)
        mean_f1 = sum(c["f1"] for c in per_seed) / len(per_seed)
        rows.append({"value": int(value), "mean_f1": mean_f1, "per_seed": per_seed})
        log.info("sweep %s=%d: mean F1 %.4f", axis, value, mean_f1)
    return rows
