"""Checkpoint files.

Byte layout, all integers little-endian:

    magic      8 bytes   b"AGACKPT\\0"
    version    u32       currently 1
    hlen       u64       length of the header in bytes
    header     hlen      UTF-8 JSON, sorted keys, compact separators
    blob       8*n       float64 little-endian values of every tensor entry
    digest     32 bytes  sha256 of all preceding bytes

The header holds the run configuration, the training state scalars (epoch,
optimizer step, RNG state, history, initial loss) and a list of tensor
entries ``{"name", "shape", "offset"}`` where ``offset`` counts float64
values into the blob. Entry names are ``param/<parameter name>``,
``adam_m/<name>``, ``adam_v/<name>`` and ``class_weights``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .data import atomic_write_bytes
from .errors import CheckpointError
from .model import AgaConfig, AgaModel
from .train import OptimizerState, TrainState

MAGIC = b"AGACKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


@dataclass
class Checkpoint:
    config: dict  # run configuration snapshot; config["model"] builds the AgaConfig
    params: Dict[str, np.ndarray]
    epoch: int = 0
    optimizer: Optional[OptimizerState] = None
    rng_state: Optional[dict] = None
    history: List[dict] = field(default_factory=list)
    initial_loss: Optional[float] = None
    class_weights: Optional[np.ndarray] = None

    # -- construction ----------------------------------------------------------------
    @classmethod
    def from_model(cls, model: AgaModel, config: Optional[dict] = None, state: Optional[TrainState] = None) -> "Checkpoint":
        config = dict(config or {})
        config["model"] = model.cfg.to_dict()
        params = {k: p.data.copy() for k, p in model.parameters().items()}
        if state is None:
            return cls(config, params)
        return cls(
            config,
            params,
            epoch=state.epoch,
            optimizer=OptimizerState({k: v.copy() for k, v in state.optimizer.m.items()}, {k: v.copy() for k, v in state.optimizer.v.items()}, state.optimizer.step),
            rng_state=state.rng_state,
            history=list(state.history),
            initial_loss=state.initial_loss,
            class_weights=None if state.class_weights is None else np.asarray(state.class_weights, dtype=np.float64),
        )

    def build_model(self) -> AgaModel:
        model = AgaModel(AgaConfig(**self.config["model"]), seed=0)
        model.load_parameters(self.params)
        return model

    def train_state(self) -> TrainState:
        if self.optimizer is None or self.rng_state is None:
            raise CheckpointError("checkpoint carries no training state to resume from")
        return TrainState(self.epoch, self.optimizer, self.rng_state, list(self.history), self.initial_loss, self.class_weights)

    # -- serialization -----------------------------------------------------------------
    def _tensors(self) -> Dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        if self.optimizer is not None:
            out.update({f"adam_m/{k}": v for k, v in self.optimizer.m.items()})
            out.update({f"adam_v/{k}": v for k, v in self.optimizer.v.items()})
        if self.class_weights is not None:
            out["class_weights"] = np.asarray(self.class_weights)
        return out

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name, arr in sorted(self._tensors().items()):
            arr = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.size
        header = {
            "config": self.config,
            "epoch": self.epoch,
            "optimizer_step": None if self.optimizer is None else self.optimizer.step,
            "rng_state": self.rng_state,
            "history": self.history,
            "initial_loss": self.initial_loss,
            "tensors": entries,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        body = _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if len(buf) < _PREFIX.size + _DIGEST:
            raise CheckpointError(f"checkpoint too short ({len(buf)} bytes)")
        body, digest = buf[:-_DIGEST], buf[-_DIGEST:]
        if hashlib.sha256(body).digest() != digest:
            raise CheckpointError("checkpoint content hash mismatch; file is corrupted")
        magic, version, hlen = _PREFIX.unpack_from(body)
        if magic != MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(body[_PREFIX.size:_PREFIX.size + hlen])
        except ValueError as exc:
            raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
        blob = np.frombuffer(body, dtype="<f8", offset=_PREFIX.size + hlen) if len(body) > _PREFIX.size + hlen else np.zeros(0)
        tensors = {}
        for e in header["tensors"]:
            n = int(np.prod(e["shape"], dtype=np.int64))
            if e["offset"] + n > blob.size:
                raise CheckpointError(f"tensor {e['name']} runs past the end of the data")
            tensors[e["name"]] = blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
        params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
        optimizer = None
        if header["optimizer_step"] is not None:
            m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")}
            v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam_v/")}
            optimizer = OptimizerState(m, v, header["optimizer_step"])
        return cls(
            header["config"],
            params,
            epoch=header["epoch"],
            optimizer=optimizer,
            rng_state=header["rng_state"],
            history=header["history"],
            initial_loss=header["initial_loss"],
            class_weights=tensors.get("class_weights"),
        )


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    atomic_write_bytes(path, checkpoint.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return Checkpoint.from_bytes(buf)
