"""Supervised training: class-weighted cross-entropy, AdamW, cosine schedule."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import Episode, class_frequencies, inverted_weights
from .errors import ConfigError, ContractError, DivergenceError, LossError
from .metrics import summarize
from .model import AgaModel, StepOutput
from .tensor import Tensor

log = logging.getLogger(__name__)

DESK_LR = 5e-3


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr_peak: float = 2e-4
    lr_min: float = 0.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    supervise: str = "all"  # "all" supervised timesteps or only the "last"
    class_reweighting: bool = True
    unsupervised_classes: Tuple[int, ...] = ()

    def __post_init__(self):
        self.unsupervised_classes = tuple(int(c) for c in self.unsupervised_classes)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"epochs must be >= 0 and batch_size >= 1, got {self.epochs}, {self.batch_size}")
        if self.lr_peak < 0 or not 0 <= self.lr_min <= max(self.lr_peak, 0):
            raise ConfigError(f"need lr_peak >= 0 and 0 <= lr_min <= lr_peak, got {self.lr_peak}, {self.lr_min}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("betas must lie in [0, 1) and eps must be positive")
        if self.supervise not in ("all", "last"):
            raise ConfigError(f"supervise must be 'all' or 'last', got {self.supervise!r}")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """Defaults for small synthetic runs: a higher peak learning rate of 5e-3."""
        return cls(**{"lr_peak": DESK_LR, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unsupervised_classes"] = list(self.unsupervised_classes)
        return d


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, Tensor]) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()}, {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def cosine_lr(step: int, total_steps: int, lr_peak: float, lr_min: float = 0.0) -> float:
    if step >= total_steps:
        return lr_min
    step = max(step, 0)
    return lr_min + 0.5 * (lr_peak - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_step(params: Dict[str, Tensor], state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """In-place AdamW update using ``p.grad``; parameters without a grad see a zero gradient."""
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * p.data
        p.data = p.data - lr * update


def clip_grad_norm(params: Dict[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad**2)) for p in params.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def supervision_mask(targets: np.ndarray, class_weights: np.ndarray, mode: str = "all") -> np.ndarray:
    """Boolean (B, T) mask of timesteps that contribute to the loss."""
    targets = np.atleast_2d(targets)
    mask = targets >= 0
    mask &= class_weights[np.where(mask, targets, 0)] > 0
    if mode == "last":
        last = np.zeros_like(mask)
        for b in range(mask.shape[0]):
            idx = np.flatnonzero(mask[b])
            if len(idx):
                last[b, idx[-1]] = True
        mask = last
    return mask


def sequence_loss(outputs: Sequence[StepOutput], targets, class_weights, mode: str = "all") -> Tensor:
    """Mean over supervised timesteps of class_weight[target] * cross-entropy."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if targets.shape[1] != len(outputs):
        raise ContractError(f"{len(outputs)} outputs but targets cover {targets.shape[1]} timesteps")
    mask = supervision_mask(targets, class_weights, mode)
    count = int(mask.sum())
    if count == 0:
        raise LossError("no supervised timesteps in this batch")
    total = None
    for t, out in enumerate(outputs):
        if not mask[:, t].any():
            continue
        tgt = np.where(mask[:, t], targets[:, t], 0)
        w = np.where(mask[:, t], class_weights[tgt], 0.0)
        term = T.cross_entropy(out.logits, tgt, w).sum()
        total = term if total is None else total + term
    return total * (1.0 / count)


# -- batching ------------------------------------------------------------------------
def stack_batch(episodes: Sequence[Episode]):
    frames = np.stack([ep.embeddings for ep in episodes]).astype(np.float64)
    labels = np.stack([ep.actions if ep.actions is not None else np.full(ep.T, -1) for ep in episodes])
    targets = np.stack([ep.targets for ep in episodes])
    return frames, labels, targets


def make_batches(episodes: Sequence[Episode], batch_size: int, rng: Optional[np.random.Generator]) -> List[List[int]]:
    """Index batches of equal-length episodes; shuffled when ``rng`` is given."""
    by_len: Dict[int, List[int]] = {}
    order = rng.permutation(len(episodes)) if rng is not None else np.arange(len(episodes))
    for i in order:
        by_len.setdefault(episodes[i].T, []).append(int(i))
    batches = []
    for length in sorted(by_len):
        idx = by_len[length]
        batches.extend(idx[j:j + batch_size] for j in range(0, len(idx), batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def has_ground_truth_guidance(model: AgaModel, training: bool) -> bool:
    mode = model.cfg.guidance_train if training else model.cfg.guidance_infer
    return mode == "ground_truth_onehot"


# -- evaluation --------------------------------------------------------------------------
def collect_predictions(
    model: AgaModel,
    episodes: Sequence[Episode],
    point: str = "last",
    uniform_masks: Optional[Sequence[np.ndarray]] = None,
    batch_size: int = 128,
) -> Tuple[np.ndarray, np.ndarray]:
    """Eval-mode (predictions, targets) at the last supervised timestep ("last") or at every one ("all")."""
    preds, tgts = [], []
    with model.frozen():
        for idx in make_batches(episodes, batch_size, None):
            batch = [episodes[i] for i in idx]
            frames, labels, targets = stack_batch(batch)
            masks = None if uniform_masks is None else np.stack([uniform_masks[i] for i in idx])
            gt = labels if has_ground_truth_guidance(model, False) else None
            p = model.predict(frames, labels=gt, uniform_masks=masks)
            for b in range(len(batch)):
                valid = np.flatnonzero(targets[b] >= 0)
                if len(valid) == 0:
                    continue
                steps = valid[-1:] if point == "last" else valid
                preds.append(p[b, steps])
                tgts.append(targets[b, steps])
    if not preds:
        raise ContractError("no episode has a supervised target to evaluate")
    return np.concatenate(preds), np.concatenate(tgts)


def evaluate(model: AgaModel, episodes: Sequence[Episode], ks: Sequence[int] = (1, 5), point: str = "last") -> Dict[str, float]:
    return summarize(collect_predictions(model, episodes, point), ks)


def dataset_loss(model: AgaModel, episodes: Sequence[Episode], class_weights, mode: str = "all", batch_size: int = 128) -> float:
    """Eval-mode mean weighted loss over all supervised timesteps of a dataset."""
    total, count = 0.0, 0
    with model.frozen():
        for idx in make_batches(episodes, batch_size, None):
            frames, labels, targets = stack_batch([episodes[i] for i in idx])
            gt = labels if has_ground_truth_guidance(model, False) else None
            outs = model.forward_sequence(frames, labels=gt)
            mask = supervision_mask(targets, class_weights, mode)
            n = int(mask.sum())
            if n:
                total += sequence_loss(outs, targets, class_weights, mode).item() * n
                count += n
    if count == 0:
        raise LossError("dataset has no supervised timesteps")
    return total / count


# -- training loop --------------------------------------------------------------------------
@dataclass
class TrainState:
    """Everything needed to continue a run after ``epoch`` completed epochs."""

    epoch: int
    optimizer: OptimizerState
    rng_state: dict
    history: List[dict] = field(default_factory=list)
    initial_loss: Optional[float] = None
    class_weights: Optional[np.ndarray] = None


@dataclass
class TrainReport:
    epochs: List[dict]
    initial_loss: float
    final_loss: float
    class_weights: np.ndarray

    def to_lines(self) -> str:
        """One JSON object per line: epoch records, then a summary record."""
        lines = [json.dumps(r, sort_keys=True) for r in self.epochs]
        summary = {"kind": "summary", "initial_loss": self.initial_loss, "final_loss": self.final_loss, "class_weights": list(map(float, self.class_weights))}
        lines.append(json.dumps(summary, sort_keys=True))
        return "\n".join(lines) + "\n"


def compute_class_weights(episodes: Sequence[Episode], n_classes: int, cfg: TrainConfig) -> np.ndarray:
    counts = class_frequencies(episodes, n_classes)
    weights = inverted_weights(counts) if cfg.class_reweighting else (counts > 0).astype(np.float64)
    for c in cfg.unsupervised_classes:
        weights[c] = 0.0
    return weights


def train(
    model: AgaModel,
    episodes: Sequence[Episode],
    cfg: TrainConfig,
    val_episodes: Optional[Sequence[Episode]] = None,
    callbacks: Sequence[Callable] = (),
    resume: Optional[TrainState] = None,
    eval_ks: Sequence[int] = (1, 5),
) -> TrainReport:
    """Train ``model`` in place.

    Each callback is called as ``cb(model, state, record)`` after every epoch.
    Passing the ``TrainState`` delivered to a callback as ``resume`` continues
    the run exactly where it stopped.
    """
    if not episodes:
        raise ContractError("training needs a nonempty dataset")
    params = model.parameters()
    n_batches = len(make_batches(episodes, cfg.batch_size, None))
    total_steps = cfg.epochs * n_batches
    if resume is None:
        weights = compute_class_weights(episodes, model.cfg.n_classes, cfg)
        rng = np.random.default_rng(cfg.seed)
        state = TrainState(0, OptimizerState.zeros_like(params), rng.bit_generator.state, [], None, weights)
        state.initial_loss = dataset_loss(model, episodes, weights, cfg.supervise)
    else:
        state = resume
        weights = np.asarray(state.class_weights)
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state

    for epoch in range(state.epoch, cfg.epochs):
        losses = []
        lr = cfg.lr_peak
        for idx in make_batches(episodes, cfg.batch_size, rng):
            frames, labels, targets = stack_batch([episodes[i] for i in idx])
            if not supervision_mask(targets, weights, cfg.supervise).any():
                continue
            lr = cosine_lr(state.optimizer.step, total_steps, cfg.lr_peak, cfg.lr_min)
            T.zero_grad(params.values())
            outs = model.forward_sequence(frames, labels=labels if has_ground_truth_guidance(model, True) else None, training=True, rng=rng)
            loss = sequence_loss(outs, targets, weights, cfg.supervise)
            value = loss.item()
            if not math.isfinite(value):
                snapshot = {
                    "epoch": epoch,
                    "step": state.optimizer.step,
                    "loss": value,
                    "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in params.items()},
                }
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, step {state.optimizer.step}", snapshot)
            T.backward(loss)
            clip_grad_norm(params, cfg.clip_norm)
            adamw_step(params, state.optimizer, lr, cfg)
            losses.append(value)
        record = {"kind": "epoch", "epoch": epoch + 1, "loss": float(np.mean(losses)) if losses else float("nan"), "lr": lr}
        if val_episodes:
            record.update({f"val_{k}": v for k, v in evaluate(model, val_episodes, eval_ks).items()})
        state.epoch = epoch + 1
        state.rng_state = rng.bit_generator.state
        state.history.append(record)
        log.info("epoch %d loss %.4f", epoch + 1, record["loss"])
        for cb in callbacks:
            cb(model, state, record)

    final = dataset_loss(model, episodes, weights, cfg.supervise)
    return TrainReport(list(state.history), float(state.initial_loss), final, weights)
