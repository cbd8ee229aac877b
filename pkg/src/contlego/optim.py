"""Adam optimizer and the cosine-annealing learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import AutogradError, Tensor

__all__ = ["AdamState", "adam_step", "LrSchedule", "lr_at"]


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update; zeroes gradients afterwards.

    ``params`` maps names to Tensors whose gradients have been populated.
    """
    missing = [n for n, p in params.items() if p.requires_grad and p.grad is None]
    if missing:
        raise AutogradError(f"adam_step: gradients missing for {missing}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()


@dataclass(frozen=True)
class LrSchedule:
    """Cyclic cosine annealing between base_lr and min_lr with period t_max.

    ``mode`` records whether the epoch counter fed to ``lr_at`` is the global
    epoch ("global") or the epoch within the current experience ("restart");
    the caller supplies the matching counter.
    """

    base_lr: float = 5e-5
    min_lr: float = 0.0
    t_max: int = 200
    mode: str = "global"

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if not 0.0 <= self.min_lr <= self.base_lr:
            raise ValueError("need 0 <= min_lr <= base_lr")
        if self.mode not in ("global", "restart"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")


def lr_at(schedule: LrSchedule, t: int) -> float:
    """lr = min + (base - min) * (1 + cos(pi * (t mod t_max) / t_max)) / 2."""
    if t < 0:
        raise ValueError("epoch index must be >= 0")
    frac = (t % schedule.t_max) / schedule.t_max
    return schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (
        1.0 + math.cos(math.pi * frac)
    )
