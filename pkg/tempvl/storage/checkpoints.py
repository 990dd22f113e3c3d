"""Checkpoint persistence: named parameter tensors plus optional training state."""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import numpy as np

from tempvl.core.tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tempvl-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable checkpoint or one that does not fit the model."""


@dataclass
class Checkpoint:
    step: int
    params: Dict[str, np.ndarray]
    config: Optional[Dict[str, Any]] = None
    optimizer: Optional[Dict[str, Any]] = None
    rng: Optional[Dict[str, Any]] = None
    extra: Dict[str, Any] = field(default_factory=dict)


def checkpoint_path(run_dir: Path, step: int) -> Path:
    return Path(run_dir) / f"ckpt_{step}.json"


def list_checkpoints(run_dir: Path) -> Dict[int, Path]:
    """Step -> path for every ``ckpt_<step>.json`` directly under ``run_dir``."""
    found: Dict[int, Path] = {}
    for path in Path(run_dir).glob("ckpt_*.json"):
        step = path.stem[len("ckpt_"):]
        if step.isdigit():
            found[int(step)] = path
    return dict(sorted(found.items()))


def remove_checkpoints(run_dir: Path, after_step: int = -1) -> List[Path]:
    """Delete checkpoints later than ``after_step``; returns the removed paths."""
    removed = []
    for step, path in list_checkpoints(run_dir).items():
        if step > after_step:
            try:
                path.unlink()
            except OSError as e:
                logger.error(f"Error removing stale checkpoint {path}: {e}", exc_info=True)
                raise CheckpointError(f"cannot remove stale checkpoint {path}: {e}") from e
            removed.append(path)
    if removed:
        logger.info(f"Removed {len(removed)} stale checkpoint(s) from {run_dir}")
    return removed


def save_checkpoint(
    path: Path,
    params: Mapping[str, Tensor],
    step: int,
    config: Optional[Dict[str, Any]] = None,
    optimizer: Optional[Dict[str, Any]] = None,
    rng: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write a versioned JSON checkpoint; floats round-trip exactly."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": step,
        "config": config,
        "params": {
            name: {"shape": list(p.shape), "data": p.data.ravel().tolist()} for name, p in params.items()
        },
        "optimizer": optimizer,
        "rng": rng,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload), encoding="utf-8")
    except OSError as e:
        logger.error(f"Error writing checkpoint {path}: {e}", exc_info=True)
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint written: {path}")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        logger.error(f"Error reading checkpoint {path}: {e}", exc_info=True)
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has unsupported version {payload.get('version')}")
    params = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    return Checkpoint(
        step=int(payload["step"]),
        params=params,
        config=payload.get("config"),
        optimizer=payload.get("optimizer"),
        rng=payload.get("rng"),
    )


def restore_parameters(params: Mapping[str, Tensor], arrays: Mapping[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into ``params``; any name or shape mismatch is an error."""
    problems: List[str] = []
    for name, param in params.items():
        if name not in arrays:
            problems.append(f"{name}: missing from checkpoint (model {param.shape})")
        elif arrays[name].shape != param.shape:
            problems.append(f"{name}: checkpoint {arrays[name].shape} vs model {param.shape}")
    for name in arrays:
        if name not in params:
            problems.append(f"{name}: not a model parameter (checkpoint {arrays[name].shape})")
    if problems:
        raise CheckpointError("checkpoint does not match the model:\n  " + "\n  ".join(problems))
    for name, param in params.items():
        param.data = arrays[name].copy()
        param.zero_grad()
