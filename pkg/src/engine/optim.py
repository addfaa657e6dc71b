"""
SGD with momentum and coupled weight decay, and the warmup-then-cosine
schedule used for the learning rate and the pseudo-label temperature.
"""

import math
from dataclasses import dataclass
from typing import List

import numpy as np

from src.core.exceptions import InvalidEpoch, NonFiniteGradient, ShapeMismatch
from src.engine.model import ModelParams


@dataclass
class OptimizerState:
    velocity: List[np.ndarray]
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4

    @classmethod
    def for_params(cls, params: ModelParams, lr: float, momentum: float = 0.9,
                   weight_decay: float = 5e-4) -> 'OptimizerState':
        return cls([np.zeros_like(a) for a in params.arrays()], lr, momentum, weight_decay)


def sgd_step(params: ModelParams, grads: ModelParams,
             state: OptimizerState) -> ModelParams:
    """v <- momentum*v + g + wd*theta; theta <- theta - lr*v. Velocity updated in place."""
    param_arrays = params.arrays()
    grad_arrays = grads.arrays()
    if len(grad_arrays) != len(param_arrays):
        raise ShapeMismatch(f"{len(grad_arrays)} gradient arrays for {len(param_arrays)} parameters")
    for position, (theta, g) in enumerate(zip(param_arrays, grad_arrays)):
        if theta.shape != g.shape:
            raise ShapeMismatch(f"parameter {position}: shape {theta.shape} vs gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"parameter {position} has a non-finite gradient")

    updated = []
    for position, (theta, g) in enumerate(zip(param_arrays, grad_arrays)):
        v = state.momentum * state.velocity[position] + g + state.weight_decay * theta
        state.velocity[position] = v
        stepped = theta - state.lr * v
        if not np.all(np.isfinite(stepped)):
            raise NonFiniteGradient(f"parameter {position} is not finite after the step")
        updated.append(stepped)
    return ModelParams.from_arrays(updated)


@dataclass
class Schedule:
    """Linear start -> peak over warmup_epochs, then cosine peak -> floor"""
    start: float
    peak: float
    floor: float
    warmup_epochs: int
    total_epochs: int

    def __post_init__(self):
        if self.floor > self.peak:
            raise ValueError(f"schedule floor {self.floor} exceeds peak {self.peak}")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} outside [0, {self.total_epochs}]")


def schedule_value(s: Schedule, epoch: int, iter_fraction: float = 0.0) -> float:
    terminal = epoch == s.total_epochs and iter_fraction == 0.0
    if not terminal and not 0 <= epoch < s.total_epochs:
        raise InvalidEpoch(f"epoch {epoch} outside [0, {s.total_epochs})")
    if not 0.0 <= iter_fraction < 1.0:
        raise InvalidEpoch(f"iteration fraction {iter_fraction} outside [0, 1)")

    t = epoch + iter_fraction
    if t < s.warmup_epochs:
        return s.start + (s.peak - s.start) * (t / s.warmup_epochs)
    span = s.total_epochs - s.warmup_epochs
    if span == 0:
        return s.floor
    progress = (t - s.warmup_epochs) / span
    return s.peak - (s.peak - s.floor) * 0.5 * (1.0 - math.cos(math.pi * progress))
