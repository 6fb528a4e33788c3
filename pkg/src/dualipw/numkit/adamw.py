"""AdamW with decoupled weight decay, operating on named numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

__all__ = ["AdamWConfig", "AdamW", "OptimizerError"]


class OptimizerError(Exception):
    """Raised when an update cannot be applied (e.g. NaN gradients)."""


@dataclass(frozen=True)
class AdamWConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("eps must be positive and weight_decay non-negative")


class AdamW:
    """Bias-corrected Adam moments plus decoupled weight decay.

    Updates parameter arrays in place; one optimizer per model so runs
    never share moment state.
    """

    def __init__(self, params: Mapping[str, np.ndarray], config: AdamWConfig):
        self.params = dict(params)
        self.config = config
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        for name in self.params:
            g = grads.get(name)
            if g is not None and not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for parameter {name!r}")

        cfg = self.config
        self.step_count += 1
        bc1 = 1.0 - cfg.beta1**self.step_count
        bc2 = 1.0 - cfg.beta2**self.step_count
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            if cfg.weight_decay:
                p -= cfg.lr * cfg.weight_decay * p
            p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
