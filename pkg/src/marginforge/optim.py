"""SGD with momentum and RMSProp, with step decay and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class OptimizerError(Exception):
    pass


class DivergenceError(OptimizerError):
    """Non-finite gradient encountered; carries the step and parameter name."""

    def __init__(self, step: int, param: str):
        self.step = step
        self.param = param
        super().__init__(f"non-finite gradient for {param!r} at step {step}")


@dataclass
class OptimizerConfig:
    kind: str = "sgd_momentum"          # sgd_momentum | rmsprop
    learning_rate: float = 0.01
    momentum: float = 0.9               # sgd_momentum only
    rms_decay: float = 0.9              # rmsprop only
    rms_epsilon: float = 1e-8
    weight_decay: float = 0.0
    lr_decay: tuple[float, int] | None = None   # (factor, every_n_steps)

    def validate(self) -> None:
        if self.kind not in ("sgd_momentum", "rmsprop"):
            raise OptimizerError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise OptimizerError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise OptimizerError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 < self.rms_decay < 1.0:
            raise OptimizerError(f"rms_decay must be in (0, 1), got {self.rms_decay}")
        if self.weight_decay < 0:
            raise OptimizerError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.lr_decay is not None:
            factor, every = self.lr_decay
            if not 0.0 < factor <= 1.0 or every < 1:
                raise OptimizerError(f"bad lr_decay {self.lr_decay!r}")


@dataclass
class OptimizerState:
    slots: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


def effective_lr(config: OptimizerConfig, step_count: int) -> float:
    lr = config.learning_rate
    if config.lr_decay is not None:
        factor, every = config.lr_decay
        lr *= factor ** (step_count // every)
    return lr


def step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
         state: OptimizerState, config: OptimizerConfig):
    """One parameter update. Returns (new params, state); inputs untouched.

    Weight decay is decoupled: theta <- theta - lr*wd*theta before the
    gradient term, identically under both optimizer kinds.
    """
    config.validate()
    lr = effective_lr(config, state.step_count)
    new_params: dict[str, np.ndarray] = {}
    new_slots: dict[str, np.ndarray] = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != theta.shape:
            raise OptimizerError(
                f"gradient shape {g.shape} != parameter shape {theta.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(state.step_count, name)
        theta = theta.copy()
        if config.weight_decay > 0.0:
            theta -= lr * config.weight_decay * theta
        if config.kind == "sgd_momentum":
            v = state.slots.get(name)
            v = g.copy() if v is None else config.momentum * v + g
            theta -= lr * v
            new_slots[name] = v
        else:
            s = state.slots.get(name)
            s = np.zeros_like(theta) if s is None else s
            s = config.rms_decay * s + (1.0 - config.rms_decay) * g * g
            theta -= lr * g / np.sqrt(s + config.rms_epsilon)
            new_slots[name] = s
        new_params[name] = theta
    return new_params, OptimizerState(new_slots, state.step_count + 1)
