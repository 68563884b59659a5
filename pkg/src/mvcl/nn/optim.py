"""SGD with momentum and weight decay, and the step-decay learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal

import numpy as np

from ..errors import ConfigError, NumericError


@dataclass
class OptimizerConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 240
    decay_epochs: tuple = (120, 160, 200)
    decay_factor: float = 0.1
    batch_size: int = 64

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError(f"decay_epochs must be strictly increasing, got {self.decay_epochs}")
        if self.decay_epochs and self.decay_epochs[-1] >= self.epochs:
            raise ConfigError("every decay epoch must fall before the last epoch")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("epochs and batch_size must be positive")


def lr_at(config: OptimizerConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    n = sum(1 for e in config.decay_epochs if epoch >= e)
    # decimal arithmetic so 0.1 * 0.1 lands on the double nearest 0.01
    lr = Decimal(repr(config.base_lr)) * Decimal(repr(config.decay_factor)) ** n
    return float(lr)


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0):
    """In-place update of ``params`` and ``velocity``.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v.
    All gradients are checked before anything is modified.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    for name, g in grads.items():
        p = params[name]
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return params


def step_state(state, grads: dict, config: OptimizerConfig, lr: float):
    sgd_step(state.parameters(), grads, state.velocity, lr, config.momentum, config.weight_decay)
    state.step += 1
    return state
