"""Model checkpoints: a weights file plus a JSON sidecar with config and progress.

Optimizer momentum is stored in the weights file under ``__velocity__/`` names
so an interrupted run can be resumed exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .autodiff.serialize import atomic_write, load_weights, save_weights
from .autodiff.tensor import ShapeError
from .config import RunConfig
from .model import FMRT
from .training import VELOCITY_PREFIX


@dataclass
class Checkpoint:
    model: FMRT
    step: int
    velocity: Dict[str, np.ndarray]


def meta_path(weights_path: str) -> str:
    return weights_path + ".json"


def save_checkpoint(path: str, model: FMRT, step: int = 0, velocity: Optional[Dict[str, np.ndarray]] = None) -> None:
    tensors = dict(model.state_dict())
    for name, v in (velocity or {}).items():
        tensors[VELOCITY_PREFIX + name] = v
    save_weights(path, tensors)
    meta = {"config": model.cfg.to_dict(), "step": int(step)}
    atomic_write(meta_path(path), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def read_meta(path: str) -> Optional[dict]:
    try:
        with open(meta_path(path), encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        return None


def load_checkpoint(path: str, cfg: Optional[RunConfig] = None) -> Checkpoint:
    """Rebuild the model from ``path``.

    The sidecar config is used unless ``cfg`` is given; a shape disagreement
    between the file and the architecture raises :class:`ShapeError`.
    """
    meta = read_meta(path) or {}
    if cfg is None:
        cfg = RunConfig.from_dict(meta["config"]) if "config" in meta else RunConfig.desk()
    tensors = load_weights(path)
    velocity = {k[len(VELOCITY_PREFIX):]: v for k, v in tensors.items() if k.startswith(VELOCITY_PREFIX)}
    state = {k: v for k, v in tensors.items() if not k.startswith(VELOCITY_PREFIX)}
    model = FMRT(cfg)
    model.load_state_dict(state)
    own = dict(model.named_parameters())
    for name, v in velocity.items():
        if name not in own or own[name].shape != v.shape:
            raise ShapeError(f"velocity entry {name!r} does not fit the model")
    return Checkpoint(model, int(meta.get("step", 0)), velocity)
