"""Train-and-evaluate helpers and hyperparameter sweeps."""

from __future__ import annotations

import dataclasses
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .data import Episode
from .errors import ConfigError
from .metrics import summarize
from .model import AgaConfig, AgaModel
from .train import TrainConfig, TrainReport, collect_predictions, train

SWEEP_PARAMS = {"alpha": ("alpha", float), "queue": ("queue_size", int)}


def fit_and_evaluate(
    model_cfg: AgaConfig,
    train_cfg: TrainConfig,
    train_episodes: Sequence[Episode],
    val_episodes: Sequence[Episode],
    seed: int = 0,
    ks: Sequence[int] = (1, 5),
    point: str = "last",
) -> Tuple[AgaModel, TrainReport, Dict[str, float]]:
    """Train a fresh model whose initialization and training RNG both use ``seed``."""
    model = AgaModel(model_cfg, seed=seed)
    report = train(model, train_episodes, dataclasses.replace(train_cfg, seed=seed))
    metrics = summarize(collect_predictions(model, val_episodes, point), ks)
    return model, report, metrics


def parse_values(param: str, text: str) -> list:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; expected one of {sorted(SWEEP_PARAMS)}")
    items = [s for s in (t.strip() for t in text.split(",")) if s]
    if not items:
        raise ConfigError("sweep needs at least one value in --values")
    cast = SWEEP_PARAMS[param][1]
    try:
        return [cast(s) for s in items]
    except ValueError as exc:
        raise ConfigError(f"bad value for {param}: {exc}") from exc


def run_sweep(
    param: str,
    values: Sequence,
    model_cfg: AgaConfig,
    train_cfg: TrainConfig,
    train_episodes: Sequence[Episode],
    val_episodes: Sequence[Episode],
    seeds: Sequence[int] = (0,),
    ks: Sequence[int] = (1, 5),
) -> List[dict]:
    """One row per (value, seed) with the validation metrics."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    field, cast = SWEEP_PARAMS[param]
    configs = [dataclasses.replace(model_cfg, **{field: cast(v)}) for v in values]
    rows = []
    for value, cfg in zip(values, configs):
        for seed in seeds:
            _, report, metrics = fit_and_evaluate(cfg, train_cfg, train_episodes, val_episodes, seed, ks)
            rows.append({"param": param, "value": cast(value), "seed": int(seed), "final_loss": report.final_loss, **metrics})
    return rows


def median_by_value(rows: Sequence[dict], metric: str = "mt5r") -> Dict[object, float]:
    groups: Dict[object, list] = {}
    for r in rows:
        groups.setdefault(r["value"], []).append(r[metric])
    return {v: float(np.median(m)) for v, m in groups.items()}
