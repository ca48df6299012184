"""TOML run configuration.

Layout (every section optional, every key maps to a config field)::

    seed = 0
    out_dir = "runs/example"

    [task]            # arguments of ``random_task``; kind = "default" | "history" | "large_vocab"
    kind = "default"
    n_actions = 12

    [model]           # AgaConfig fields
    alpha = 0.8

    [train]           # TrainConfig fields
    epochs = 30

    [data]
    train_episodes = 256
    val_episodes = 300

    [analysis.backward]
    eta = 100.0
"""

from __future__ import annotations

import dataclasses
import inspect
import sys
from dataclasses import dataclass, field
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import TaskSpec, default_task, history_task, large_vocab_task, random_task
from .errors import ConfigError
from .model import AgaConfig
from .train import TrainConfig

TASK_KINDS = {"default": default_task, "history": history_task, "large_vocab": large_vocab_task}
_TASK_KEYS = set(inspect.signature(random_task).parameters)
_TOP_KEYS = {"seed", "out_dir", "task", "model", "train", "data", "analysis"}
_DATA_KEYS = {"train_episodes", "val_episodes"}
_BACKWARD_KEYS = {"eta", "eps", "max_iter"}


def _fields(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section: str, given: dict, allowed: set) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")


def build_task(task: dict, seed: int) -> TaskSpec:
    task = dict(task)
    kind = task.pop("kind", "default")
    if kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {kind!r}; expected one of {sorted(TASK_KINDS)}")
    _check_keys("task", task, _TASK_KEYS)
    task.setdefault("seed", seed)
    return TASK_KINDS[kind](**task)


@dataclass
class RunConfig:
    model: AgaConfig = field(default_factory=AgaConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: dict = field(default_factory=dict)
    data: dict = field(default_factory=lambda: {"train_episodes": 256, "val_episodes": 300})
    backward: dict = field(default_factory=dict)
    seed: int = 0
    out_dir: Optional[str] = None

    def task_spec(self) -> TaskSpec:
        return build_task(self.task, self.seed)

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "task": dict(self.task),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": dict(self.data),
            "analysis": {"backward": dict(self.backward)},
        }
        if self.out_dir is not None:
            d["out_dir"] = self.out_dir
        return d

    @classmethod
    def from_dict(cls, raw: dict, seed: Optional[int] = None) -> "RunConfig":
        """Validate every section; ``seed`` overrides the file's seed when given."""
        _check_keys("top level", raw, _TOP_KEYS)
        seed = int(raw.get("seed", 0)) if seed is None else int(seed)
        model = dict(raw.get("model", {}))
        train = dict(raw.get("train", {}))
        data = {"train_episodes": 256, "val_episodes": 300, **raw.get("data", {})}
        analysis = dict(raw.get("analysis", {}))
        _check_keys("model", model, _fields(AgaConfig))
        _check_keys("train", train, _fields(TrainConfig))
        _check_keys("data", data, _DATA_KEYS)
        _check_keys("analysis", analysis, {"backward"})
        backward = dict(analysis.get("backward", {}))
        _check_keys("analysis.backward", backward, _BACKWARD_KEYS)
        train.setdefault("seed", seed)
        task = dict(raw.get("task", {}))
        try:
            cfg = cls(AgaConfig(**model), TrainConfig(**train), task, data, backward, seed, raw.get("out_dir"))
            spec = cfg.task_spec()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if "n_classes" not in model:
            cfg.model = dataclasses.replace(cfg.model, n_classes=spec.n_classes, background_class=spec.background_class)
        if "d_backbone" not in model:
            cfg.model = dataclasses.replace(cfg.model, d_backbone=spec.d_backbone)
        for key in _DATA_KEYS:
            if int(data[key]) < 0:
                raise ConfigError(f"[data] {key} must be >= 0")
        return cfg


def load_run_config(path, seed: Optional[int] = None) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return RunConfig.from_dict(raw, seed)
