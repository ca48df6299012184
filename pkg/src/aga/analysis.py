"""Post-training analyses of a trained model.

* forward analysis: which hypothetical past actions a query action attends to
* backward analysis: gradient descent on the past guide vectors towards a
  counterfactual target action, with the model frozen
* gate trace: the mean gating value at every frame of an episode
* robustness sweep: accuracy as more and more stored guides are reset to
  the uniform distribution
* guidance comparison: train/evaluate with different guide signals
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import Episode, atomic_write_bytes
from .errors import AnalysisAborted, CapabilityError, ConfigError, ContractError, GuidanceError
from .layers import attention_weights
from .metrics import summarize
from .model import GUIDANCE_MODES, AgaConfig, AgaModel, one_hot
from .tensor import Tensor
from .train import TrainConfig, collect_predictions, train

ANALYSIS_KINDS = ("forward", "backward", "gate_trace", "robustness", "guidance")


@dataclass
class AnalysisReport:
    kind: str
    payload: dict
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ANALYSIS_KINDS:
            raise ConfigError(f"unknown report kind {self.kind!r}")

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "payload": _jsonable(self.payload), "provenance": _jsonable(self.provenance)}, indent=2, sort_keys=True)

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_json().encode())

    @classmethod
    def from_json(cls, text: str) -> "AnalysisReport":
        d = json.loads(text)
        return cls(d["kind"], d["payload"], d.get("provenance", {}))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_plot_data(path, columns: Dict[str, Sequence]) -> None:
    """Tab-separated columns with a header row, for external plotting."""
    names = list(columns)
    n = len(next(iter(columns.values()))) if columns else 0
    lines = ["\t".join(names)]
    for i in range(n):
        lines.append("\t".join(repr(float(columns[c][i])) if not isinstance(columns[c][i], str) else columns[c][i] for c in names))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


# -- forward analysis ---------------------------------------------------------------
@dataclass
class ForwardProbe:
    query_actions: List[int]
    candidate_actions: List[int]

    def validate(self, n_classes: int) -> None:
        if not self.candidate_actions or not self.query_actions:
            raise ContractError("a probe needs at least one query action and one candidate")
        for a in list(self.query_actions) + list(self.candidate_actions):
            if not 0 <= a < n_classes:
                raise IndexError(f"action {a} outside [0, {n_classes})")


def probe_query(query_actions: Sequence[int], n_classes: int, alpha: float) -> np.ndarray:
    """One-hot of the first action, then EMA over the rest in order."""
    q = one_hot(query_actions[0], n_classes)
    for a in query_actions[1:]:
        q = alpha * one_hot(a, n_classes) + (1.0 - alpha) * q
    return q


def forward_analysis(model: AgaModel, probe: ForwardProbe, per_head: bool = False):
    """Head-averaged attention weights over the candidate actions.

    With ``per_head=True`` the (h, n_candidates) weights are returned as well.
    """
    cfg = model.cfg
    probe.validate(cfg.n_classes)
    with model.frozen():
        q_in = Tensor(probe_query(probe.query_actions, cfg.n_classes, cfg.alpha)[None])
        k_in = Tensor(one_hot(probe.candidate_actions, cfg.n_classes)[None])
        q = T.rms_norm(model.e_q(q_in).reshape(1, 1, cfg.d_key), model.norms["prenorm.q.gain"])
        k = T.rms_norm(model.e_k(k_in), model.norms["prenorm.k.gain"])
        w = attention_weights(cfg.attention, q, k, model.attn).data[0, :, 0, :]
    mean = w.mean(axis=0)
    return (mean, w) if per_head else mean


# -- backward analysis ----------------------------------------------------------------
@dataclass
class BackwardConfig:
    target: int
    eta: float = 1e2
    eps: float = 1e-6
    max_iter: int = 5000

    def __post_init__(self):
        if self.eta <= 0 or self.eps <= 0 or self.max_iter < 1:
            raise ConfigError(f"need eta > 0, eps > 0, max_iter >= 1; got {self}")


@dataclass
class BackwardResult:
    t: int
    target: int
    y0: np.ndarray  # (L, n_classes)
    y_star: np.ndarray
    losses: List[float]
    iterations: int
    stop_reason: str  # "plateau" or "max_iter"
    initial_probs: np.ndarray
    final_probs: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        return self.y_star - self.y0

    @property
    def initial_rank(self) -> int:
        return int(np.sum(self.initial_probs > self.initial_probs[self.target]))

    @property
    def final_rank(self) -> int:
        return int(np.sum(self.final_probs > self.final_probs[self.target]))

    def changes(self, top: int = 5) -> List[dict]:
        """Per past timestep, the most promoted (positive) and suppressed (negative) actions."""
        rows = []
        first = self.t - len(self.y0)
        for i, row in enumerate(self.delta):
            order = np.argsort(-row, kind="stable")
            rows.append({
                "t": first + i,
                "promoted": [(int(c), float(row[c])) for c in order[:top] if row[c] > 0],
                "suppressed": [(int(c), float(row[c])) for c in order[::-1][:top] if row[c] < 0],
            })
        return rows

    def to_payload(self) -> dict:
        return {
            "t": self.t,
            "target": self.target,
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "losses": self.losses,
            "initial_rank": self.initial_rank,
            "final_rank": self.final_rank,
            "initial_probs": self.initial_probs,
            "final_probs": self.final_probs,
            "y0": self.y0,
            "y_star": self.y_star,
            "delta": self.delta,
            "changes": self.changes(),
        }


class BackwardObjective:
    """L(Y) = -log p(target) at frame ``t`` as a function of the stored guides Y.

    The frames, the encoded embeddings and the EMA of guides older than the
    queue stay fixed; the EMA query is rebuilt from Y. Calling the objective
    returns (loss, dL/dY, predicted distribution). Use inside ``model.frozen()``.
    """

    def __init__(self, model: AgaModel, frames, target: int, t: Optional[int] = None, labels=None):
        cfg = model.cfg
        frames = np.asarray(frames, dtype=np.float64)
        t = frames.shape[0] - 1 if t is None else t
        if not 1 <= t < frames.shape[0]:
            raise ContractError(f"backward analysis needs 1 <= t < {frames.shape[0]}, got {t}")
        if not 0 <= target < cfg.n_classes:
            raise IndexError(f"target {target} outside [0, {cfg.n_classes})")
        self.model, self.target, self.t = model, target, t
        self.length = min(t, cfg.queue_size)
        outs = model.forward_sequence(frames[: t + 1], labels=None if labels is None else np.asarray(labels)[: t + 1])
        guides = np.stack([o.guide.data[0] for o in outs])
        self.y0 = guides[t - self.length:t].copy()
        self.ema_pre = np.zeros(cfg.n_classes)
        for g in guides[: t - self.length]:
            self.ema_pre = cfg.alpha * g + (1.0 - cfg.alpha) * self.ema_pre
        embeds = model.encode_frame(Tensor(frames[None, : t + 1])).data
        self.values = Tensor(embeds[:, t - self.length:t])
        self.current = Tensor(embeds[:, t])
        self.original_probs = outs[t].prediction.data[0].copy()

    def __call__(self, y: np.ndarray):
        alpha = self.model.cfg.alpha
        y_t = Tensor(np.asarray(y, dtype=np.float64)[None], requires_grad=True)
        ema = Tensor(self.ema_pre[None])
        for i in range(self.length):
            ema = y_t[:, i] * alpha + ema * (1.0 - alpha)
        history, _, _ = self.model.attend(ema, y_t, self.values)
        _, _, logits = self.model.head(history, self.current)
        loss = T.cross_entropy(logits[0], self.target)
        T.backward(loss)
        z = logits.data[0] - logits.data[0].max()
        probs = np.exp(z) / np.exp(z).sum()
        return loss.item(), y_t.grad[0], probs


def backward_analysis(
    model: AgaModel,
    frames,
    cfg: BackwardConfig,
    t: Optional[int] = None,
    y0: Optional[np.ndarray] = None,
    labels=None,
) -> BackwardResult:
    """Minimise -log p(target) at frame ``t`` over the stored guides by plain gradient descent.

    ``frames`` is one episode's (T, d_backbone) features; ``t`` defaults to the
    last frame. The starting guides default to those the model itself stored
    while running the episode. Stops once two consecutive losses differ by
    less than ``eps`` or after ``max_iter`` updates.
    """
    with model.frozen():
        objective = BackwardObjective(model, frames, cfg.target, t, labels)
        start = objective.y0 if y0 is None else np.asarray(y0, dtype=np.float64)
        if start.shape != objective.y0.shape:
            raise ContractError(f"y0 must have shape {objective.y0.shape}, got {start.shape}")
        y = start.copy()
        loss, grad, probs0 = objective(y)
        losses = [loss]
        probs = probs0
        j = 0
        reason = "max_iter"
        while True:
            y = y - cfg.eta * grad
            j += 1
            loss, grad, probs = objective(y)
            if not math.isfinite(loss):
                raise AnalysisAborted(f"non-finite loss at iteration {j}", losses)
            losses.append(loss)
            if abs(losses[-1] - losses[-2]) < cfg.eps:
                reason = "plateau"
                break
            if j >= cfg.max_iter:
                break
    return BackwardResult(objective.t, cfg.target, start, y, losses, j, reason, probs0, probs)


# -- gate trace ---------------------------------------------------------------------------------
def gate_trace(model: AgaModel, episode: Episode) -> List[dict]:
    """Rows of (t, action, mean gate) for every frame of ``episode``."""
    if not model.cfg.gating:
        raise CapabilityError("gate trace needs a model trained with gating enabled")
    labels = episode.actions
    gt = labels if model.cfg.guidance_infer == "ground_truth_onehot" else None
    with model.frozen():
        outs = model.forward_sequence(episode.embeddings, labels=gt)
    rows = []
    for t, out in enumerate(outs):
        action = int(labels[t]) if labels is not None else -1
        rows.append({"t": t, "action": action, "gate": float(out.gate.data[0].mean())})
    return rows


# -- robustness sweep -------------------------------------------------------------------------------
def reset_masks(episodes: Sequence[Episode], seed: int, k: int, perms: Optional[List[np.ndarray]] = None) -> List[np.ndarray]:
    """Per episode, mark the first ``k`` frames of one random permutation."""
    if perms is None:
        rng = np.random.default_rng(seed)
        perms = [rng.permutation(ep.T) for ep in episodes]
    masks = []
    for ep, perm in zip(episodes, perms):
        m = np.zeros(ep.T, dtype=bool)
        m[perm[:k]] = True
        masks.append(m)
    return masks


def robustness_sweep(
    model: AgaModel,
    episodes: Sequence[Episode],
    seed: int = 0,
    levels: Optional[Sequence[int]] = None,
    ks: Sequence[int] = (1, 5),
    point: str = "last",
) -> List[dict]:
    """Metrics when the guides of k randomly chosen frames are replaced by the uniform distribution.

    The replacement happens as the guide is stored, so both the keys and the
    EMA query see the uniform vector. ``levels`` defaults to 0..max T.
    """
    max_t = max(ep.T for ep in episodes)
    levels = range(max_t + 1) if levels is None else levels
    rng = np.random.default_rng(seed)
    perms = [rng.permutation(ep.T) for ep in episodes]
    rows = []
    for k in levels:
        masks = None if k == 0 else reset_masks(episodes, seed, k, perms)
        metrics = summarize(collect_predictions(model, episodes, point, uniform_masks=masks), ks)
        rows.append({"k": int(k), **metrics})
    return rows


# -- guidance comparison -------------------------------------------------------------------------------
def guidance_comparison(
    train_episodes: Sequence[Episode],
    val_episodes: Sequence[Episode],
    model_cfg: AgaConfig,
    train_cfg: TrainConfig,
    pairs: Sequence[Tuple[str, str]],
    seed: int = 0,
    ks: Sequence[int] = (1, 5),
    point: str = "last",
) -> List[dict]:
    """Train a fresh model per training mode and evaluate it under each requested inference mode.

    Pairs sharing a training mode reuse one trained model; with a fixed seed
    this is identical to training it again.
    """
    for train_mode, infer_mode in pairs:
        for mode in (train_mode, infer_mode):
            if mode not in GUIDANCE_MODES:
                raise ConfigError(f"unknown guidance mode {mode!r}")
        if "ground_truth_onehot" in (train_mode, infer_mode):
            for ep in list(train_episodes) + list(val_episodes):
                if ep.actions is None:
                    raise GuidanceError("ground-truth guidance needs labeled episodes")
    trained: Dict[str, AgaModel] = {}
    rows = []
    for train_mode, infer_mode in pairs:
        if train_mode not in trained:
            cfg = AgaConfig(**{**model_cfg.to_dict(), "guidance_train": train_mode, "guidance_infer": train_mode})
            model = AgaModel(cfg, seed=seed)
            train(model, train_episodes, dataclasses.replace(train_cfg, seed=seed))
            trained[train_mode] = model
        model = trained[train_mode]
        model.cfg.guidance_infer = infer_mode
        try:
            metrics = summarize(collect_predictions(model, val_episodes, point), ks)
        finally:
            model.cfg.guidance_infer = train_mode
        rows.append({"train": train_mode, "infer": infer_mode, **metrics})
    return rows
