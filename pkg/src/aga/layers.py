"""Parameterised building blocks: MLP stacks and multi-head attention.

The stacks reproduce the per-component layer orders used by the model:

    f_x          LayerNorm -> ReLU -> Dropout -> Linear(d_backbone, d_model) -> ScaleNorm
    E_Q, E_K     LayerNorm -> ReLU -> Dropout -> Linear(n_classes, d_key)
    E_V          LayerNorm -> ReLU -> Dropout -> Linear(d_model, d_model)
    FFN          Linear(d_model, d_model/2) -> GELU -> Dropout -> Linear(d_model/2, d_model)
    gate MLP     Linear(2 d_model, d_model/4) -> ReLU -> Dropout -> Linear(d_model/4, d_model)
    classifier   LayerNorm -> ReLU -> Dropout -> Linear(d_model, n_classes)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, EmptyHistoryError, ParameterError, ShapeError
from .tensor import Tensor

# Layer descriptors are plain tuples: (kind, *args)
#   ("layernorm", dim) ("rmsnorm", dim) ("scalenorm", dim)
#   ("relu",) ("gelu",) ("dropout", rate) ("linear", in_dim, out_dim)
LayerSpec = Tuple


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class MlpBlock:
    """An ordered stack of normalisation, activation, dropout and linear layers.

    Parameters are registered as ``"{name}.{index}.{field}"`` so checkpoint
    entries mirror the stack layout.
    """

    def __init__(self, name: str, stack: Sequence[LayerSpec], rng: np.random.Generator):
        self.name = name
        self.stack: List[LayerSpec] = [tuple(layer) for layer in stack]
        self.params: Dict[str, Tensor] = {}
        self._validate()
        for i, layer in enumerate(self.stack):
            kind = layer[0]
            prefix = f"{name}.{i}"
            if kind == "linear":
                _, d_in, d_out = layer
                self.params[f"{prefix}.weight"] = uniform_init(rng, d_in, (d_in, d_out))
                self.params[f"{prefix}.bias"] = uniform_init(rng, d_in, (d_out,))
            elif kind == "layernorm":
                self.params[f"{prefix}.gain"] = Tensor(np.ones(layer[1]), requires_grad=True)
                self.params[f"{prefix}.bias"] = Tensor(np.zeros(layer[1]), requires_grad=True)
            elif kind == "rmsnorm":
                self.params[f"{prefix}.gain"] = Tensor(np.ones(layer[1]), requires_grad=True)
            elif kind == "scalenorm":
                self.params[f"{prefix}.gain"] = Tensor(np.full(1, math.sqrt(layer[1])), requires_grad=True)

    def _validate(self) -> None:
        width = None
        for i, layer in enumerate(self.stack):
            kind = layer[0]
            if kind == "linear":
                if width is not None and layer[1] != width:
                    raise ConfigError(f"{self.name}[{i}]: linear in-dim {layer[1]} does not chain from {width}")
                width = layer[2]
            elif kind in ("layernorm", "rmsnorm", "scalenorm"):
                if width is not None and layer[1] != width:
                    raise ConfigError(f"{self.name}[{i}]: {kind} dim {layer[1]} does not chain from {width}")
                width = layer[1]
            elif kind == "dropout":
                if not 0.0 <= layer[1] < 1.0:
                    raise ParameterError(f"{self.name}[{i}]: dropout rate {layer[1]} outside [0, 1)")
            elif kind not in ("relu", "gelu"):
                raise ConfigError(f"{self.name}[{i}]: unknown layer kind {kind!r}")

    @property
    def in_dim(self) -> int:
        for layer in self.stack:
            if layer[0] == "linear" or layer[0].endswith("norm"):
                return layer[1]
        raise ConfigError(f"{self.name}: stack has no sized layer")

    @property
    def out_dim(self) -> int:
        for layer in reversed(self.stack):
            if layer[0] == "linear":
                return layer[2]
            if layer[0].endswith("norm"):
                return layer[1]
        raise ConfigError(f"{self.name}: stack has no sized layer")

    def __call__(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.forward(x, training, rng)

    def forward(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"{self.name}[0] {self.stack[0]}: expected last axis {self.in_dim}, got shape {x.shape}")
        p = self.params
        for i, layer in enumerate(self.stack):
            kind, prefix = layer[0], f"{self.name}.{i}"
            if kind == "linear":
                x = T.matmul(x, p[prefix + ".weight"]) + p[prefix + ".bias"]
            elif kind == "layernorm":
                x = T.layer_norm(x, p[prefix + ".gain"], p[prefix + ".bias"])
            elif kind == "rmsnorm":
                x = T.rms_norm(x, p[prefix + ".gain"])
            elif kind == "scalenorm":
                x = T.scale_norm(x, p[prefix + ".gain"])
            elif kind == "relu":
                x = T.relu(x)
            elif kind == "gelu":
                x = T.gelu(x)
            elif kind == "dropout":
                x = T.dropout(x, layer[1], training, rng)
        return x


def frame_encoder_stack(d_backbone: int, d_model: int, dropout: float) -> list:
    return [("layernorm", d_backbone), ("relu",), ("dropout", dropout), ("linear", d_backbone, d_model), ("scalenorm", d_model)]


def action_encoder_stack(n_classes: int, d_key: int, dropout: float) -> list:
    return [("layernorm", n_classes), ("relu",), ("dropout", dropout), ("linear", n_classes, d_key)]


def value_encoder_stack(d_model: int, dropout: float) -> list:
    return [("layernorm", d_model), ("relu",), ("dropout", dropout), ("linear", d_model, d_model)]


def ffn_stack(d_model: int, hidden: int, dropout: float) -> list:
    return [("linear", d_model, hidden), ("gelu",), ("dropout", dropout), ("linear", hidden, d_model)]


def gate_stack(d_model: int, hidden: int, dropout: float) -> list:
    return [("linear", 2 * d_model, hidden), ("relu",), ("dropout", dropout), ("linear", hidden, d_model)]


def classifier_stack(d_model: int, n_classes: int, dropout: float) -> list:
    return [("layernorm", d_model), ("relu",), ("dropout", dropout), ("linear", d_model, n_classes)]


@dataclass(frozen=True)
class MultiHeadConfig:
    n_heads: int = 4
    d_model: int = 64
    d_key: int = 32

    def __post_init__(self):
        if min(self.n_heads, self.d_model, self.d_key) < 1:
            raise ConfigError(f"attention dims must be positive: {self}")
        if self.d_model % self.n_heads or self.d_key % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} and d_key={self.d_key} must be divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_head_key(self) -> int:
        return self.d_key // self.n_heads


def attention_params(cfg: MultiHeadConfig, rng: np.random.Generator, name: str = "attn") -> Dict[str, Tensor]:
    """Per-head projections stored side by side: head i owns columns i*d_head..(i+1)*d_head."""
    return {
        f"{name}.w_q": uniform_init(rng, cfg.d_key, (cfg.d_key, cfg.d_key)),
        f"{name}.w_k": uniform_init(rng, cfg.d_key, (cfg.d_key, cfg.d_key)),
        f"{name}.w_v": uniform_init(rng, cfg.d_model, (cfg.d_model, cfg.d_model)),
        f"{name}.w_o": uniform_init(rng, cfg.d_model, (cfg.d_model, cfg.d_model)),
    }


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (..., n, h*d) -> (..., h, n, d)
    lead = x.shape[:-2]
    n, width = x.shape[-2:]
    x = x.reshape(lead + (n, n_heads, width // n_heads))
    k = len(lead)
    return x.transpose(tuple(range(k)) + (k + 1, k, k + 2))


def attention_weights(cfg: MultiHeadConfig, Q: Tensor, K: Tensor, params: Dict[str, Tensor], name: str = "attn") -> Tensor:
    """Per-head softmax weights, shape (..., h, q, s)."""
    if K.shape[-2] == 0:
        raise EmptyHistoryError("attention over an empty history; bypass the first frame instead")
    if Q.shape[-1] != cfg.d_key or K.shape[-1] != cfg.d_key:
        raise ShapeError(f"query {Q.shape} / key {K.shape} last axis must equal d_key={cfg.d_key}")
    qh = _split_heads(T.matmul(Q, params[f"{name}.w_q"]), cfg.n_heads)
    kh = _split_heads(T.matmul(K, params[f"{name}.w_k"]), cfg.n_heads)
    scores = T.matmul(qh, kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(cfg.d_head_key))
    return T.softmax(scores, axis=-1)


def multi_head_attention(
    cfg: MultiHeadConfig, Q: Tensor, K: Tensor, V: Tensor, params: Dict[str, Tensor], name: str = "attn"
) -> Tuple[Tensor, Tensor]:
    """Scaled dot-product attention with ``cfg.n_heads`` heads.

    Q is (..., q, d_key), K is (..., s, d_key), V is (..., s, d_model).
    Returns the (..., q, d_model) output and the (..., h, q, s) weights.
    """
    Q, K, V = T.as_tensor(Q), T.as_tensor(K), T.as_tensor(V)
    if V.shape[-2] != K.shape[-2]:
        raise ShapeError(f"keys {K.shape} and values {V.shape} disagree on history length")
    if V.shape[-1] != cfg.d_model:
        raise ShapeError(f"value last axis {V.shape[-1]} must equal d_model={cfg.d_model}")
    weights = attention_weights(cfg, Q, K, params, name)
    vh = _split_heads(T.matmul(V, params[f"{name}.w_v"]), cfg.n_heads)
    heads = T.matmul(weights, vh)  # (..., h, q, d_head)
    k = heads.ndim - 3
    merged = heads.transpose(tuple(range(k)) + (k + 1, k, k + 2))
    merged = merged.reshape(merged.shape[:-2] + (cfg.d_model,))
    return T.matmul(merged, params[f"{name}.w_o"]), weights
