"""RMSProp."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


class NonFiniteGradientError(ArithmeticError):
    """A gradient contained NaN or inf; no parameter was updated."""


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    rho: float = 0.9
    epsilon: float = 1e-8
    batch_size: int = 32

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must be in (0, 1), got {self.rho}")
        if self.learning_rate < 0.0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epsilon < 0.0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "OptimizerConfig":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        return asdict(self)


def rmsprop_step(params: dict, grads: dict, state: dict, config: OptimizerConfig):
    """One in-place RMSProp update over every key of ``grads``.

    ``ms <- rho * ms + (1 - rho) * g**2``; ``w <- w - lr * g / (sqrt(ms) + eps)``.
    ``state`` holds the running mean squares and is filled with zeros on
    first use of a key. All gradients are checked before anything changes.
    """
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {key!r}")
    rho, lr, eps = config.rho, config.learning_rate, config.epsilon
    for key, g in grads.items():
        ms = state.get(key)
        if ms is None:
            ms = state[key] = np.zeros_like(g)
        ms *= rho
        ms += (1.0 - rho) * g * g
        denom = np.sqrt(ms) + eps
        # eps == 0 with a zero gradient history would give 0/0
        params[key] -= lr * np.divide(g, denom, out=np.zeros_like(g), where=denom > 0)
    return params, state
