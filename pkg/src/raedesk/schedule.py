"""Timestep schedules with a dimension-dependent Moebius shift.

High-dimensional token spaces need more time spent near the noise end of
the trajectory; the shift remaps a base-dimension schedule accordingly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import tensor as T

DEFAULT_BASE_DIM = 4096


@dataclass(frozen=True)
class ShiftedSchedule:
    """Base dimension n, effective dimension m, shift factor alpha = sqrt(m/n)."""

    n: int = DEFAULT_BASE_DIM
    m: int = DEFAULT_BASE_DIM
    alpha: float = field(init=False)

    def __post_init__(self):
        if self.n <= 0 or self.m <= 0:
            raise ValueError("dimensions must be positive")
        object.__setattr__(self, "alpha", math.sqrt(self.m / self.n))

    @classmethod
    def from_alpha(cls, alpha: float) -> "ShiftedSchedule":
        """Schedule with an explicitly overridden shift factor (ablations)."""
        sched = cls.__new__(cls)
        object.__setattr__(sched, "n", 1)
        object.__setattr__(sched, "m", 1)
        object.__setattr__(sched, "alpha", float(alpha))
        return sched

    @classmethod
    def identity(cls) -> "ShiftedSchedule":
        return cls.from_alpha(1.0)


def shift_timestep(sched: ShiftedSchedule, t_n: float) -> float:
    """Moebius remap t_m = a*t / (1 + (a-1)*t); fixes 0 and 1, increasing."""
    if not 0.0 <= t_n <= 1.0:
        raise ValueError(f"timestep {t_n} outside [0, 1]")
    if t_n == 0.0 or t_n == 1.0:
        return t_n  # fixed points, kept exact against rounding in 1+(a-1)t
    a = sched.alpha
    return a * t_n / (1.0 + (a - 1.0) * t_n)


def inverse_shift(sched: ShiftedSchedule, t_m: float) -> float:
    """Inverse remap: the same Moebius map with 1/alpha."""
    if not 0.0 <= t_m <= 1.0:
        raise ValueError(f"timestep {t_m} outside [0, 1]")
    if t_m == 0.0 or t_m == 1.0:
        return t_m
    a = 1.0 / sched.alpha
    return a * t_m / (1.0 + (a - 1.0) * t_m)


def sampler_grid(sched: ShiftedSchedule, steps: int) -> list[float]:
    """steps+1 shifted timesteps from 1 down to 0 (uniform base grid)."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    return [shift_timestep(sched, k / steps) for k in range(steps, -1, -1)]


def sample_train_timesteps(sched: ShiftedSchedule, batch: int, seed: int):
    """Training timesteps: Uniform(0,1) base draws pushed through the shift."""
    g = T.rng(seed)
    t_n = g.random(batch)
    a = sched.alpha
    return a * t_n / (1.0 + (a - 1.0) * t_n)
