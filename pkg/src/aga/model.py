"""The recurrent action-guided attention cell.

At every frame the model keeps a FIFO queue of (frame embedding, guide
vector) pairs. Guides are the model's own predictions (or a one-hot
substitute, depending on the guidance mode). Keys come from the guides,
values from the embeddings, and the query from an exponential moving average
of past guides. The attended history is fused with the current embedding by
a sigmoid gate and classified.

All tensors carry a leading batch axis so that several episodes of the same
length advance in lock-step.
"""

from __future__ import annotations

import contextlib
import hashlib
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, GuidanceError, ShapeError
from .layers import (
    MlpBlock,
    MultiHeadConfig,
    action_encoder_stack,
    attention_params,
    classifier_stack,
    ffn_stack,
    frame_encoder_stack,
    gate_stack,
    multi_head_attention,
    value_encoder_stack,
)
from .tensor import Tensor

GUIDANCE_MODES = ("self_pred_full", "self_pred_top1_onehot", "ground_truth_onehot")


@dataclass
class AgaConfig:
    n_classes: int = 13
    d_backbone: int = 32
    d_model: int = 64
    d_key: int = 32
    n_heads: int = 4
    queue_size: int = 16
    alpha: float = 0.8
    dropout: float = 0.1
    gating: bool = True
    guidance_train: str = "self_pred_full"
    guidance_infer: str = "self_pred_full"
    frame_seconds: float = 1.0
    t_a: int = 1
    # class used as the ground-truth guide for unlabeled frames
    background_class: Optional[int] = None

    def __post_init__(self):
        if self.queue_size < 1:
            raise ConfigError(f"queue_size must be >= 1, got {self.queue_size}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.t_a < 1:
            raise ConfigError(f"t_a must be >= 1, got {self.t_a}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.frame_seconds <= 0:
            raise ConfigError(f"frame_seconds must be positive, got {self.frame_seconds}")
        for mode in (self.guidance_train, self.guidance_infer):
            if mode not in GUIDANCE_MODES:
                raise ConfigError(f"unknown guidance mode {mode!r}; expected one of {GUIDANCE_MODES}")
        if self.background_class is not None and not 0 <= self.background_class < self.n_classes:
            raise ConfigError(f"background_class {self.background_class} outside [0, {self.n_classes})")
        if self.d_model % 4:
            raise ConfigError(f"d_model must be divisible by 4, got {self.d_model}")
        self.attention  # validates head divisibility

    @property
    def attention(self) -> MultiHeadConfig:
        return MultiHeadConfig(self.n_heads, self.d_model, self.d_key)

    @property
    def anticipation_seconds(self) -> float:
        return self.t_a * self.frame_seconds

    @property
    def ffn_hidden(self) -> int:
        return self.d_model // 2

    @property
    def gate_hidden(self) -> int:
        return self.d_model // 4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def full_scale(cls, n_classes: int, d_backbone: int, **overrides) -> "AgaConfig":
        base = dict(n_classes=n_classes, d_backbone=d_backbone, d_model=2048, d_key=512, n_heads=16, dropout=0.6)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class AgaState:
    """Per-episode recurrent state, batched.

    ``queue`` holds up to S (embedding, guide) pairs, oldest first, each of
    shape (B, d_model) and (B, n_classes). ``ema`` is the query average for
    the upcoming step.
    """

    queue: Tuple[Tuple[Tensor, Tensor], ...]
    ema: Tensor
    t: int = 0

    @classmethod
    def initial(cls, batch: int, n_classes: int) -> "AgaState":
        return cls(queue=(), ema=Tensor(np.zeros((batch, n_classes))), t=0)


@dataclass
class StepOutput:
    logits: Tensor
    prediction: Tensor  # (B, n_classes), softmax of logits
    fused: Tensor  # o_t
    history: Tensor  # h~_t
    gate: Optional[Tensor]  # g_t, None with gating disabled
    weights: Optional[Tensor]  # (B, h, 1, |queue|), None at t=0
    guide: Tensor  # vector pushed into the queue at this step
    keys: Optional[Tensor] = None  # attention keys before projection (B, |queue|, d_key)


def ema_update(ema_prev, prediction_prev, alpha: float):
    """ alpha * prediction_prev + (1 - alpha) * ema_prev; works on Tensors or arrays."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if T.as_tensor(ema_prev).shape != T.as_tensor(prediction_prev).shape:
        raise ShapeError(f"ema shape {np.shape(ema_prev)} != prediction shape {np.shape(prediction_prev)}")
    if isinstance(ema_prev, Tensor) or isinstance(prediction_prev, Tensor):
        return prediction_prev * alpha + ema_prev * (1.0 - alpha)
    return alpha * np.asarray(prediction_prev) + (1.0 - alpha) * np.asarray(ema_prev)


def fuse(history: Tensor, embedding: Tensor, gate: Tensor) -> Tensor:
    return gate * history + (1.0 - gate) * embedding


def one_hot(indices, n_classes: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros(indices.shape + (n_classes,))
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out


class AgaModel:
    """Parameters plus the forward computation for one AGA layer."""

    def __init__(self, cfg: AgaConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        c = cfg
        self.f_x = MlpBlock("f_x", frame_encoder_stack(c.d_backbone, c.d_model, c.dropout), rng)
        self.e_q = MlpBlock("e_q", action_encoder_stack(c.n_classes, c.d_key, c.dropout), rng)
        self.e_k = MlpBlock("e_k", action_encoder_stack(c.n_classes, c.d_key, c.dropout), rng)
        self.e_v = MlpBlock("e_v", value_encoder_stack(c.d_model, c.dropout), rng)
        self.attn = attention_params(c.attention, rng)
        self.norms = {
            "prenorm.q.gain": Tensor(np.ones(c.d_key), requires_grad=True),
            "prenorm.k.gain": Tensor(np.ones(c.d_key), requires_grad=True),
            "prenorm.v.gain": Tensor(np.ones(c.d_model), requires_grad=True),
            "prenorm.ffn.gain": Tensor(np.ones(c.d_model), requires_grad=True),
        }
        self.ffn = MlpBlock("ffn", ffn_stack(c.d_model, c.ffn_hidden, c.dropout), rng)
        self.gate_mlp = MlpBlock("gate", gate_stack(c.d_model, c.gate_hidden, c.dropout), rng) if c.gating else None
        self.classifier = MlpBlock("classifier", classifier_stack(c.d_model, c.n_classes, c.dropout), rng)

    # -- parameters ------------------------------------------------------------
    def parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        blocks = [self.f_x, self.e_q, self.e_k, self.e_v]
        for block in blocks:
            out.update(block.params)
        out.update(self.attn)
        out.update(self.norms)
        out.update(self.ffn.params)
        if self.gate_mlp is not None:
            out.update(self.gate_mlp.params)
        out.update(self.classifier.params)
        return out

    def load_parameters(self, values: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(values)
        extra = set(values) - set(params)
        if missing or extra:
            raise ShapeError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            v = np.asarray(values[name], dtype=np.float64)
            if v.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {v.shape}")
            p.data = v.copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily stop gradients flowing into parameters."""
        params = list(self.parameters().values())
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, flags):
                p.requires_grad = flag

    # -- computation -------------------------------------------------------------
    def encode_frame(self, features, training: bool = False, rng=None) -> Tensor:
        features = T.as_tensor(features)
        if features.shape[-1] != self.cfg.d_backbone:
            raise ShapeError(f"frame feature length {features.shape[-1]} != d_backbone={self.cfg.d_backbone}")
        return self.f_x(features, training, rng)

    def attend(self, ema: Tensor, guides: Tensor, embeddings: Tensor, training: bool = False, rng=None):
        """History context from a query average, stacked guides (B, L, C) and embeddings (B, L, d).

        Returns (h~, weights, projected keys).
        """
        n = self.norms
        q = self.e_q(ema, training, rng)
        q = T.rms_norm(q.reshape(q.shape[:-1] + (1, q.shape[-1])), n["prenorm.q.gain"])
        k = T.rms_norm(self.e_k(guides, training, rng), n["prenorm.k.gain"])
        v = T.rms_norm(self.e_v(embeddings, training, rng), n["prenorm.v.gain"])
        h, weights = multi_head_attention(self.cfg.attention, q, k, v, self.attn)
        h = h.reshape(h.shape[:-2] + (self.cfg.d_model,))
        h_tilde = h + self.ffn(T.rms_norm(h, n["prenorm.ffn.gain"]), training, rng)
        return h_tilde, weights, k

    def gate_fuse(self, history: Tensor, embedding: Tensor, training: bool = False, rng=None):
        if history.shape != embedding.shape:
            raise ShapeError(f"history {history.shape} and embedding {embedding.shape} differ")
        if self.gate_mlp is None:
            raise ConfigError("gate_fuse called on a model built with gating disabled")
        g = T.sigmoid(self.gate_mlp(T.concat([history, embedding], axis=-1), training, rng))
        return fuse(history, embedding, g), g

    def head(self, history: Tensor, embedding: Tensor, training: bool = False, rng=None):
        """Fuse, classify. Returns (fused, gate, logits)."""
        if self.cfg.gating:
            fused, gate = self.gate_fuse(history, embedding, training, rng)
        else:
            fused, gate = history + embedding, None
        return fused, gate, self.classifier(fused, training, rng)

    def step(
        self,
        state: AgaState,
        embedding: Tensor,
        supervision_guide=None,
        training: bool = False,
        rng=None,
        uniform_mask=None,
    ) -> Tuple[StepOutput, AgaState]:
        """Advance one frame.

        ``embedding`` is the already encoded frame, shape (B, d_model).
        ``supervision_guide`` is a (B, n_classes) array used in ground-truth mode.
        ``uniform_mask`` is an optional (B,) boolean array; marked episodes push
        a uniform distribution instead of their guide.
        """
        cfg = self.cfg
        embedding = T.as_tensor(embedding)
        if embedding.ndim != 2 or embedding.shape[-1] != cfg.d_model:
            raise ShapeError(f"step expects embeddings of shape (B, {cfg.d_model}), got {embedding.shape}")
        batch = embedding.shape[0]
        mode = cfg.guidance_train if training else cfg.guidance_infer
        if mode == "ground_truth_onehot" and supervision_guide is None:
            raise GuidanceError("ground_truth_onehot guidance needs a supervision guide at every step")

        if not state.queue:
            history, weights, keys = Tensor(np.zeros((batch, cfg.d_model))), None, None
        else:
            guides = T.stack([g for _, g in state.queue], axis=1)
            embeds = T.stack([e for e, _ in state.queue], axis=1)
            history, weights, keys = self.attend(state.ema, guides, embeds, training, rng)
        fused, gate, logits = self.head(history, embedding, training, rng)
        prediction = T.softmax(logits, axis=-1)

        if mode == "self_pred_full":
            guide = prediction
        elif mode == "self_pred_top1_onehot":
            guide = Tensor(one_hot(np.argmax(prediction.data, axis=-1), cfg.n_classes))
        else:
            guide = T.as_tensor(np.asarray(supervision_guide, dtype=np.float64))
            if guide.shape != (batch, cfg.n_classes):
                raise ShapeError(f"supervision guide must be ({batch}, {cfg.n_classes}), got {guide.shape}")
        if uniform_mask is not None and np.any(uniform_mask):
            m = np.asarray(uniform_mask, dtype=np.float64)[:, None]
            guide = guide * (1.0 - m) + m * (1.0 / cfg.n_classes)

        queue = state.queue + ((embedding, guide),)
        if len(queue) > cfg.queue_size:
            queue = queue[-cfg.queue_size:]
        new_state = AgaState(queue=queue, ema=ema_update(state.ema, guide, cfg.alpha), t=state.t + 1)
        out = StepOutput(logits, prediction, fused, history, gate, weights, guide, keys)
        return out, new_state

    def forward_sequence(
        self,
        frames,
        labels=None,
        training: bool = False,
        rng=None,
        uniform_masks=None,
    ) -> List[StepOutput]:
        """Run every frame of a batch of equal-length episodes.

        ``frames`` is (B, T, d_backbone) backbone features (or (T, d_backbone)
        for a single episode). ``labels`` is an optional (B, T) int array of
        per-frame action labels (-1 for unlabeled) feeding ground-truth guidance.
        ``uniform_masks`` is an optional (B, T) boolean array for guide resets.
        """
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim == 2:
            frames = frames[None]
            labels = None if labels is None else np.asarray(labels)[None]
            uniform_masks = None if uniform_masks is None else np.asarray(uniform_masks)[None]
        if frames.ndim != 3 or frames.shape[1] == 0:
            raise ShapeError(f"forward_sequence needs a nonempty (B, T, d_backbone) array, got {frames.shape}")
        batch, steps, _ = frames.shape
        guides = None
        if labels is not None:
            guides = self.label_guides(np.asarray(labels))
        embeddings = self.encode_frame(Tensor(frames), training, rng)
        state = AgaState.initial(batch, self.cfg.n_classes)
        outputs = []
        for t in range(steps):
            out, state = self.step(
                state,
                embeddings[:, t],
                supervision_guide=None if guides is None else guides[:, t],
                training=training,
                rng=rng,
                uniform_mask=None if uniform_masks is None else uniform_masks[:, t],
            )
            outputs.append(out)
        return outputs

    def label_guides(self, labels: np.ndarray) -> np.ndarray:
        """One-hot guides from per-frame labels; -1 maps to the background class."""
        labels = np.asarray(labels, dtype=np.int64)
        if np.any(labels < 0):
            if self.cfg.background_class is None:
                raise GuidanceError("unlabeled frames need a background_class for ground-truth guidance")
            labels = np.where(labels < 0, self.cfg.background_class, labels)
        if np.any(labels >= self.cfg.n_classes):
            raise GuidanceError(f"label outside [0, {self.cfg.n_classes})")
        return one_hot(labels, self.cfg.n_classes)

    def predict(self, frames, labels=None, uniform_masks=None) -> np.ndarray:
        """Eval-mode predictions, shape (B, T, n_classes)."""
        with self.frozen():
            outs = self.forward_sequence(frames, labels=labels, uniform_masks=uniform_masks)
        return np.stack([o.prediction.data for o in outs], axis=1)
