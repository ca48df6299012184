"""Top-k accuracy and class-mean top-k recall.

Ranks break ties by class index: among equal probabilities the lower index
ranks first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class EvalRecord:
    prediction: np.ndarray
    target: int

    def __post_init__(self):
        p = np.asarray(self.prediction, dtype=np.float64)
        if abs(p.sum() - 1.0) > 1e-6:
            raise ContractError(f"prediction sums to {p.sum()}, expected 1")
        object.__setattr__(self, "prediction", p)


def as_arrays(records) -> Tuple[np.ndarray, np.ndarray]:
    """Accept a list of EvalRecord or a (predictions, targets) pair."""
    if isinstance(records, tuple) and len(records) == 2:
        preds, targets = records
    else:
        records = list(records)
        preds = [r.prediction for r in records]
        targets = [r.target for r in records]
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if len(targets) == 0:
        raise ContractError("metrics need at least one record")
    if preds.shape[0] != targets.shape[0]:
        raise ContractError(f"{preds.shape[0]} predictions vs {targets.shape[0]} targets")
    return preds, targets


def target_rank(preds: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """0-based rank of each target under the index tie rule."""
    p_t = np.take_along_axis(preds, targets[:, None], axis=1)
    idx = np.arange(preds.shape[1])[None, :]
    ahead = (preds > p_t) | ((preds == p_t) & (idx < targets[:, None]))
    return ahead.sum(axis=1)


def top_k_hit(prediction, target: int, k: int) -> bool:
    prediction = np.asarray(prediction, dtype=np.float64)
    if not 1 <= k:
        raise ContractError(f"k must be >= 1, got {k}")
    return bool(target_rank(prediction[None], np.array([target]))[0] < k)


def top_k_hits(preds: np.ndarray, targets: np.ndarray, k: int) -> np.ndarray:
    return target_rank(preds, targets) < k


def accuracy(records, k: int = 1) -> float:
    preds, targets = as_arrays(records)
    return 100.0 * float(np.mean(top_k_hits(preds, targets, k)))


def per_class_recall(records, k: int = 5) -> Dict[int, float]:
    preds, targets = as_arrays(records)
    hits = top_k_hits(preds, targets, k)
    return {int(c): float(hits[targets == c].mean()) for c in np.unique(targets)}


def mean_top_k_recall(records, k: int = 5) -> float:
    """Recall averaged over the classes that appear as targets, in percent."""
    recalls = per_class_recall(records, k)
    return 100.0 * float(np.mean(list(recalls.values())))


def summarize(records, ks: Sequence[int] = (1, 5)) -> Dict[str, float]:
    preds, targets = as_arrays(records)
    out = {}
    for k in ks:
        out[f"top{k}_acc"] = accuracy((preds, targets), k)
        out[f"mt{k}r"] = mean_top_k_recall((preds, targets), k)
    return out
