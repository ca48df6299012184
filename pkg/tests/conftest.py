"""Shared fixtures and finite-difference helpers."""

import numpy as np
import pytest

from aga.data import default_task, generate_dataset
from aga.model import AgaConfig, AgaModel


def numeric_grad(f, x: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (modified in place and restored).

    With ``coords`` only those flat indices are probed; the rest stay zero.
    """
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def max_rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def tiny_config(**overrides) -> AgaConfig:
    base = dict(n_classes=5, d_backbone=6, d_model=8, d_key=8, n_heads=2, queue_size=3, alpha=0.8, dropout=0.1)
    base.update(overrides)
    return AgaConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return AgaModel(tiny_config(), seed=3)


@pytest.fixture(scope="session")
def small_task():
    return default_task(seed=0, n_actions=5, d_backbone=8, T=10)


@pytest.fixture(scope="session")
def small_episodes(small_task):
    return generate_dataset(small_task, 24, seed=11)


@pytest.fixture
def small_model(small_task):
    cfg = AgaConfig(
        n_classes=small_task.n_classes,
        d_backbone=small_task.d_backbone,
        d_model=16,
        d_key=8,
        n_heads=2,
        queue_size=4,
        background_class=small_task.background_class,
    )
    return AgaModel(cfg, seed=0)


CRITERIA = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Keep one pass/fail line per acceptance criterion for the terminal summary."""
    CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(CRITERIA[number])


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])


def brute_records_oracle(preds, targets, k):
    """(top-k accuracy, mean top-k recall) in percent from a per-record sort; ties go to the lower index."""
    hits = []
    for p, t in zip(preds, targets):
        order = sorted(range(len(p)), key=lambda c: (-p[c], c))
        hits.append(int(t) in order[:k])
    per_class = {}
    for h, t in zip(hits, targets):
        per_class.setdefault(int(t), []).append(h)
    recalls = [sum(v) / len(v) for v in per_class.values()]
    return 100.0 * sum(hits) / len(hits), 100.0 * sum(recalls) / len(recalls)
