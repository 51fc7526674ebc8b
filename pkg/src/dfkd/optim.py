"""Minibatch SGD with classical momentum and decoupled weight decay.

Update rule per parameter tensor:

    v      <- momentum * v + grad
    theta  <- theta - lr * v - lr * weight_decay * theta

Velocity persists across steps; gradient slots are zeroed after each step so
the next backward pass accumulates from zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    epochs: int = 30
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10

    def __post_init__(self):
        if not self.learning_rate > 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if self.lr_decay_every < 1:
            raise ValueError(f"lr_decay_every must be >= 1, got {self.lr_decay_every}")

    def lr_at(self, epoch: int) -> float:
        """Stepped schedule: decay by the factor every ``lr_decay_every`` epochs."""
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)


class SgdOptimizer:
    """Owns one velocity buffer per model parameter tensor."""

    def __init__(self, model, config: SgdConfig):
        self.model = model
        self.config = config
        self._velocity = {name: np.zeros_like(p) for name, p, _ in model.parameters()}

    def step(self, lr: float | None = None) -> None:
        cfg = self.config
        if lr is None:
            lr = cfg.learning_rate
        for name, p, g in self.model.parameters():
            v = self._velocity[name]
            v *= cfg.momentum
            v += g
            p -= lr * v + lr * cfg.weight_decay * p
        self.model.zero_grads()
