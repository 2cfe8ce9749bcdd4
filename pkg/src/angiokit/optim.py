"""AdamW with decoupled weight decay and a cosine warm-restart schedule.

Parameters live in a name -> ndarray dict; gradients arrive in a matching
dict. Update order is the sorted parameter name list, so runs are
reproducible regardless of dict construction order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ValidationError


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    batch_size: Optional[int] = None  # None = full batch
    schedule: str = "cosine_warm_restarts"  # or "constant"
    restart_period: int = 25  # T_0 in epochs
    restart_mult: int = 2  # period growth per restart
    min_lr_fraction: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.epochs < 1:
            raise ValidationError("optimizer needs learning_rate > 0 and epochs >= 1")
        if self.schedule not in ("cosine_warm_restarts", "constant"):
            raise ValidationError(f"unknown schedule {self.schedule!r}")
        if self.restart_period < 1 or self.restart_mult < 1:
            raise ValidationError("restart_period and restart_mult must be >= 1")


def lr_at_epoch(config: OptimizerConfig, epoch: int) -> float:
    """Learning rate for a 0-based epoch under the configured schedule."""
    if config.schedule == "constant":
        return config.learning_rate
    period = config.restart_period
    t = epoch
    while t >= period:
        t -= period
        period *= config.restart_mult
    lo = config.learning_rate * config.min_lr_fraction
    return lo + 0.5 * (config.learning_rate - lo) * (1 + np.cos(np.pi * t / period))


class AdamW:
    def __init__(self, params: Dict[str, np.ndarray], config: OptimizerConfig):
        config.validate()
        self.config = config
        self.step_count = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(
        self,
        params: Dict[str, np.ndarray],
        grads: Dict[str, np.ndarray],
        lr: Optional[float] = None,
        skip: Optional[set] = None,
    ) -> None:
        cfg = self.config
        lr = cfg.learning_rate if lr is None else lr
        self.step_count += 1
        b1c = 1.0 - cfg.beta1**self.step_count
        b2c = 1.0 - cfg.beta2**self.step_count
        for name in sorted(params):
            if skip and name in skip:
                continue
            g = grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + cfg.eps)
            params[name] -= lr * update
            if cfg.weight_decay:
                params[name] -= lr * cfg.weight_decay * params[name]
