"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from tempvl.config import TrainConfig
from tempvl.core.tensor import Tensor

logger = logging.getLogger(__name__)

# "decays by 10 times"
FINAL_LR_FACTOR = 0.1


@dataclass
class OptimizerState:
    """First/second moments per parameter and the number of updates applied."""
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Mapping[str, Tensor]) -> "OptimizerState":
        return cls(
            step=0,
            exp_avg={name: np.zeros_like(p.data) for name, p in params.items()},
            exp_avg_sq={name: np.zeros_like(p.data) for name, p in params.items()},
        )

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "exp_avg": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.exp_avg.items()},
            "exp_avg_sq": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.exp_avg_sq.items()},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "OptimizerState":
        def _arrays(section):
            return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in section.items()}

        return cls(step=int(payload["step"]), exp_avg=_arrays(payload["exp_avg"]), exp_avg_sq=_arrays(payload["exp_avg_sq"]))


def cosine_lr(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``lr_peak``, then cosine decay to ``lr_peak / 10`` at ``steps``."""
    peak = config.lr_peak
    final = peak * FINAL_LR_FACTOR
    warmup = config.effective_warmup
    if step < warmup:
        return peak * step / warmup
    span = config.steps - warmup
    if span <= 0:
        return final if step >= config.steps and config.steps > 0 else peak
    progress = min(max((step - warmup) / span, 0.0), 1.0)
    return final + (peak - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))
    if max_norm is None or total <= max_norm or total == 0.0:
        return grads, total
    factor = max_norm / total
    return {name: g * factor for name, g in grads.items()}, total


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    config: TrainConfig,
) -> OptimizerState:
    """One AdamW update in place on ``params``; decay is applied to the weights directly."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")

    state.step += 1
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        if g.shape != param.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{name}' {param.shape}")
        m = state.exp_avg.setdefault(name, np.zeros_like(param.data))
        v = state.exp_avg_sq.setdefault(name, np.zeros_like(param.data))
        param.data = param.data * (1.0 - lr * config.weight_decay)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v
        param.data = param.data - lr * (m / bias1) / (np.sqrt(v / bias2) + config.eps)
    return state
