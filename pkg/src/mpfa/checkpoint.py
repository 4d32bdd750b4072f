"""JSON checkpoint holding parameters, configuration and (optionally) temporal state."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import MPFA, ModelConfig, param_shapes
from .tensor import Tensor
from .state import TemporalState

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: MPFA
    state: TemporalState | None
    train_config: dict
    extra: dict


def checkpoint_dict(model: MPFA, state: TemporalState | None = None, train_config: dict | None = None,
                    extra: dict | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": train_config or {},
        "params": {
            name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in sorted(model.params.items())
        },
        "state": None if state is None else state.to_json_dict(),
        "extra": extra or {},
    }


def save_checkpoint(path: str | Path, model: MPFA, state: TemporalState | None = None,
                    train_config: dict | None = None, extra: dict | None = None) -> None:
    doc = checkpoint_dict(model, state, train_config, extra)
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path} is not a valid checkpoint: {exc}") from None
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version!r} is not supported (expected {FORMAT_VERSION})")
    cfg = ModelConfig(**doc["model_config"])
    expected = param_shapes(cfg)
    params = {}
    for name, shape in expected.items():
        entry = doc["params"].get(name)
        if entry is None:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if tuple(entry["shape"]) != shape:
            raise CheckpointError(f"parameter {name} has shape {entry['shape']}, expected {list(shape)}")
        params[name] = Tensor(np.array(entry["values"], dtype=np.float64).reshape(shape),
                              requires_grad=True, name=name)
    extra_names = set(doc["params"]) - set(expected)
    if extra_names:
        raise CheckpointError(f"unexpected parameters in checkpoint: {sorted(extra_names)}")
    model = MPFA(cfg, params=params)
    state = None
    if doc.get("state") is not None:
        state = model.new_state()
        state.load_json_dict(doc["state"])
    return Checkpoint(model, state, doc.get("train_config", {}), doc.get("extra", {}))
