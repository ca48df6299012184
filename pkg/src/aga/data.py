"""Synthetic anticipation episodes and the AGAE embedding file format.

Actions follow a semi-Markov chain: each segment lasts a geometric number of
frames (mean ``dwell[c]``), then the next action is drawn from a transition
row. Optionally the row depends on the previous *two* actions, and optional
background segments may be interleaved between actions; background is
transparent to the chain, so the action after a background segment still
depends on what came before it.

Frame embeddings are the class prototype plus isotropic Gaussian noise,
stored as float32 so they survive the AGAE file format bit-exactly.

AGAE layout (little-endian)::

    magic        4 bytes  b"AGAE"
    version      u32      1
    n_episodes   u32
    d_backbone   u32
    flags        u32      bit 0: labels present
    per episode:
        T        u32
        frames   T * d_backbone f32, row-major
        labels   T i32 (only with flag bit 0), -1 = unlabeled
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

AGAE_MAGIC = b"AGAE"
AGAE_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_U32 = struct.Struct("<I")


@dataclass
class TaskSpec:
    transition: np.ndarray  # (C, C) or, for history-dependent chains, (C, C, C) indexed [prev, cur]
    dwell: np.ndarray  # (C,) mean segment length in frames
    prototype: np.ndarray  # (C [+1 background], d_backbone)
    noise_sigma: float = 0.5
    T: int = 30
    t_a: int = 1
    seed: int = 0
    background_prob: float = 0.0
    background_dwell: float = 3.0
    background: bool = False

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.dwell = np.asarray(self.dwell, dtype=np.float64)
        self.prototype = np.asarray(self.prototype, dtype=np.float64)
        self.validate()

    @property
    def n_actions(self) -> int:
        return self.transition.shape[-1]

    @property
    def n_classes(self) -> int:
        return self.n_actions + int(self.background)

    @property
    def background_class(self) -> Optional[int]:
        return self.n_actions if self.background else None

    @property
    def d_backbone(self) -> int:
        return self.prototype.shape[1]

    @property
    def history_order(self) -> int:
        return self.transition.ndim - 1

    def validate(self) -> None:
        tr = self.transition
        c = tr.shape[-1]
        if tr.ndim not in (2, 3) or any(n != c for n in tr.shape):
            raise ConfigError(f"transition must be (C, C) or (C, C, C), got {tr.shape}")
        if np.any(tr < 0) or np.any(np.abs(tr.sum(axis=-1) - 1.0) > 1e-9):
            raise ConfigError("transition rows must be nonnegative and sum to 1")
        if self.dwell.shape != (c,) or np.any(self.dwell < 1):
            raise ConfigError(f"dwell must be {c} values >= 1")
        if self.prototype.ndim != 2 or self.prototype.shape[0] != self.n_classes:
            raise ConfigError(f"prototype must have {self.n_classes} rows, got shape {self.prototype.shape}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.T < 1 or self.t_a < 1:
            raise ConfigError(f"T and t_a must be >= 1, got T={self.T}, t_a={self.t_a}")
        if not 0.0 <= self.background_prob <= 1.0 or (self.background_prob > 0 and not self.background):
            raise ConfigError("background_prob must lie in [0, 1] and needs background=True")
        if self.background_dwell < 1:
            raise ConfigError("background_dwell must be >= 1")

    def to_dict(self) -> dict:
        return {
            "transition": self.transition.tolist(),
            "dwell": self.dwell.tolist(),
            "prototype": self.prototype.tolist(),
            "noise_sigma": self.noise_sigma,
            "T": self.T,
            "t_a": self.t_a,
            "seed": self.seed,
            "background_prob": self.background_prob,
            "background_dwell": self.background_dwell,
            "background": self.background,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)


def random_task(
    n_actions: int = 12,
    d_backbone: int = 32,
    dwell: float = 4.0,
    noise_sigma: float = 0.5,
    T: int = 30,
    t_a: int = 1,
    seed: int = 0,
    successors: int = 3,
    prototype_scale: float = 0.25,
    history_order: int = 1,
    background: bool = True,
    background_prob: float = 0.2,
    background_dwell: float = 3.0,
) -> TaskSpec:
    """Draw a random chain and prototype table.

    Each transition row puts Dirichlet(1) mass on ``successors`` classes other
    than the current one. With ``history_order=2`` this is done independently
    for every (previous, current) pair.
    """
    if successors < 1 or successors > n_actions - 1:
        raise ConfigError(f"successors must lie in [1, {n_actions - 1}]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A5C]))

    def row(exclude: int) -> np.ndarray:
        choices = [c for c in range(n_actions) if c != exclude]
        picked = rng.choice(choices, size=successors, replace=False)
        out = np.zeros(n_actions)
        out[picked] = rng.dirichlet(np.ones(successors))
        return out

    if history_order == 1:
        transition = np.stack([row(c) for c in range(n_actions)])
    elif history_order == 2:
        transition = np.stack([np.stack([row(c) for c in range(n_actions)]) for _ in range(n_actions)])
    else:
        raise ConfigError(f"history_order must be 1 or 2, got {history_order}")
    n_classes = n_actions + int(background)
    prototype = prototype_scale * rng.standard_normal((n_classes, d_backbone))
    return TaskSpec(
        transition=transition,
        dwell=np.full(n_actions, float(dwell)),
        prototype=prototype,
        noise_sigma=noise_sigma,
        T=T,
        t_a=t_a,
        seed=seed,
        background_prob=background_prob if background else 0.0,
        background_dwell=background_dwell,
        background=background,
    )


def default_task(seed: int = 0, **overrides) -> TaskSpec:
    """12 actions + background, T=30, t_a=1, dwell 4, noise 0.5, d_backbone 32."""
    return random_task(seed=seed, **overrides)


def history_task(seed: int = 0, **overrides) -> TaskSpec:
    """Second-order transitions over 24 actions: the next action depends on the previous two."""
    kw = dict(history_order=2, successors=2, n_actions=24)
    kw.update(overrides)
    return random_task(seed=seed, **kw)


def large_vocab_task(seed: int = 0, **overrides) -> TaskSpec:
    """100 actions with 8 successors each, so predictions spread over many plausible classes."""
    kw = dict(n_actions=100, successors=8)
    kw.update(overrides)
    return random_task(seed=seed, **kw)


@dataclass
class Episode:
    """One sequence of frame embeddings with optional per-frame action labels."""

    embeddings: np.ndarray  # (T, d_backbone) float32
    actions: Optional[np.ndarray] = None  # (T,) int, -1 = unlabeled
    t_a: int = 1

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] == 0:
            raise ShapeError(f"episode embeddings must be a nonempty (T, d) array, got {self.embeddings.shape}")
        if self.actions is not None:
            self.actions = np.asarray(self.actions, dtype=np.int64)
            if self.actions.shape != (self.embeddings.shape[0],):
                raise ShapeError(f"actions shape {self.actions.shape} does not match T={self.embeddings.shape[0]}")

    @property
    def T(self) -> int:
        return self.embeddings.shape[0]

    @property
    def targets(self) -> np.ndarray:
        """targets[t] = actions[t + t_a], or -1 where that lies past the end or is unlabeled."""
        out = np.full(self.T, -1, dtype=np.int64)
        if self.actions is not None and self.t_a < self.T:
            out[: self.T - self.t_a] = self.actions[self.t_a:]
        return out


# the synthetic generator's episodes are ordinary labeled episodes
SyntheticEpisode = Episode


def _geometric(rng: np.random.Generator, mean: float) -> int:
    return int(rng.geometric(1.0 / mean)) if mean > 1 else 1


def generate_actions(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    c = spec.n_actions
    prev, cur = int(rng.integers(c)), int(rng.integers(c))
    actions: List[int] = []
    while len(actions) < spec.T:
        actions.extend([cur] * _geometric(rng, spec.dwell[cur]))
        if len(actions) >= spec.T:
            break
        if spec.background and rng.random() < spec.background_prob:
            actions.extend([spec.background_class] * _geometric(rng, spec.background_dwell))
        row = spec.transition[cur] if spec.history_order == 1 else spec.transition[prev, cur]
        prev, cur = cur, int(rng.choice(c, p=row))
    return np.asarray(actions[: spec.T], dtype=np.int64)


def generate_episode(spec: TaskSpec, episode_seed: int) -> Episode:
    """Bit-reproducible for a given (spec.seed, episode_seed)."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, episode_seed]))
    actions = generate_actions(spec, rng)
    noise = rng.standard_normal((spec.T, spec.d_backbone)) * spec.noise_sigma
    embeddings = (spec.prototype[actions] + noise).astype(np.float32)
    return Episode(embeddings, actions, spec.t_a)


def generate_dataset(spec: TaskSpec, n_episodes: int, seed: int = 0) -> List[Episode]:
    """Episodes use seeds ``seed * 1_000_003 + i`` so train/val sets drawn with different seeds never overlap."""
    return [generate_episode(spec, seed * 1_000_003 + i) for i in range(n_episodes)]


def class_frequencies(episodes: Iterable[Episode], n_classes: int) -> np.ndarray:
    counts = np.zeros(n_classes, dtype=np.int64)
    for ep in episodes:
        tg = ep.targets
        tg = tg[tg >= 0]
        counts += np.bincount(tg, minlength=n_classes)[:n_classes]
    return counts


def inverted_weights(counts) -> np.ndarray:
    """mean(count) / count_c over present classes; absent classes get weight 0."""
    counts = np.asarray(counts, dtype=np.float64)
    present = counts > 0
    if not present.any():
        return np.zeros_like(counts)
    weights = np.zeros_like(counts)
    weights[present] = counts[present].mean() / counts[present]
    return weights


# -- AGAE files ------------------------------------------------------------------
def encode_embedding_file(episodes: Sequence[Episode], with_labels: Optional[bool] = None) -> bytes:
    if not episodes:
        raise ShapeError("cannot write an empty episode list")
    d = episodes[0].embeddings.shape[1]
    if with_labels is None:
        with_labels = all(ep.actions is not None for ep in episodes)
    parts = [_HEADER.pack(AGAE_MAGIC, AGAE_VERSION, len(episodes), d, 1 if with_labels else 0)]
    for ep in episodes:
        if ep.embeddings.shape[1] != d:
            raise ShapeError(f"episode has d_backbone {ep.embeddings.shape[1]}, expected {d}")
        parts.append(_U32.pack(ep.T))
        parts.append(np.ascontiguousarray(ep.embeddings, dtype="<f4").tobytes())
        if with_labels:
            labels = ep.actions if ep.actions is not None else np.full(ep.T, -1)
            parts.append(np.ascontiguousarray(labels, dtype="<i4").tobytes())
    return b"".join(parts)


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_embedding_file(path, episodes: Sequence[Episode], with_labels: Optional[bool] = None) -> None:
    atomic_write_bytes(path, encode_embedding_file(episodes, with_labels))


def decode_embedding_file(buf: bytes, t_a: int = 1, d_backbone: Optional[int] = None) -> List[Episode]:
    if len(buf) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(buf)} bytes)", 0)
    magic, version, n_episodes, d, flags = _HEADER.unpack_from(buf, 0)
    if magic != AGAE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != AGAE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if d == 0:
        raise FormatError("d_backbone is zero", 12)
    if flags & ~1:
        raise FormatError(f"unknown flag bits {flags:#x}", 16)
    if d_backbone is not None and d != d_backbone:
        raise ShapeError(f"file has d_backbone={d}, configuration expects {d_backbone}")
    labels_present = bool(flags & 1)
    offset = _HEADER.size
    episodes = []
    for i in range(n_episodes):
        if offset + 4 > len(buf):
            raise FormatError(f"truncated before length of episode {i}", offset)
        (steps,) = _U32.unpack_from(buf, offset)
        if steps == 0:
            raise FormatError(f"episode {i} has zero frames", offset)
        offset += 4
        n_frame_bytes = steps * d * 4
        if offset + n_frame_bytes > len(buf):
            raise FormatError(f"truncated frames in episode {i}", offset)
        frames = np.frombuffer(buf, dtype="<f4", count=steps * d, offset=offset).reshape(steps, d)
        offset += n_frame_bytes
        labels = None
        if labels_present:
            if offset + steps * 4 > len(buf):
                raise FormatError(f"truncated labels in episode {i}", offset)
            labels = np.frombuffer(buf, dtype="<i4", count=steps, offset=offset).astype(np.int64)
            if np.any(labels < -1):
                raise FormatError(f"episode {i} has labels below -1", offset)
            offset += steps * 4
        episodes.append(Episode(frames.astype(np.float32), labels, t_a))
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after last episode", offset)
    return episodes


def load_embedding_file(path, t_a: int = 1, d_backbone: Optional[int] = None) -> List[Episode]:
    return decode_embedding_file(Path(path).read_bytes(), t_a=t_a, d_backbone=d_backbone)
