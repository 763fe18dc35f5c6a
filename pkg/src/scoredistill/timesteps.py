"""Annealed timestep window: linear shrink during warmup, fixed afterwards."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .schedule import DiffusionSchedule, continuous_to_step


@dataclass(frozen=True)
class TimestepWindow:
    total_steps: int
    warmup_steps: int | None = None
    t_min_up: float = 0.22
    t_max_up: float = 0.98
    t_min_low: float = 0.02
    t_max_low: float = 0.78

    def __post_init__(self):
        if int(self.total_steps) != self.total_steps or self.total_steps < 1:
            raise ValueError(f"total_steps must be a positive integer, got {self.total_steps}")
        if self.warmup_steps is None:
            object.__setattr__(self, "warmup_steps", math.ceil(self.total_steps / 3))
        if int(self.warmup_steps) != self.warmup_steps or self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be a positive integer, got {self.warmup_steps}")
        for name in ("t_min_up", "t_max_up", "t_min_low", "t_max_low"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name}={v} must lie in (0, 1)")
        if not (self.t_min_up < self.t_max_up and self.t_min_low < self.t_max_low):
            raise ValueError("each window needs t_min < t_max")
        if not (self.t_min_low <= self.t_min_up and self.t_max_low <= self.t_max_up):
            raise ValueError("the lower window must not sit above the upper one")

    @classmethod
    def from_fraction(cls, total_steps: int, warmup_fraction: float = 1 / 3, **bounds) -> "TimestepWindow":
        if not 0.0 < warmup_fraction <= 1.0:
            raise ValueError(f"warmup_fraction must lie in (0, 1], got {warmup_fraction}")
        return cls(total_steps, max(1, math.ceil(total_steps * warmup_fraction - 1e-9)), **bounds)


def window_at(step: int, w: TimestepWindow) -> tuple[float, float]:
    """``(t_min, t_max)`` as fractions of T at optimizer ``step``."""
    if int(step) != step or not 0 <= step <= w.total_steps:
        raise ValueError(f"step {step} outside [0, {w.total_steps}]")
    if step >= w.warmup_steps:
        return w.t_min_low, w.t_max_low
    f = step / w.warmup_steps
    return (w.t_min_up + f * (w.t_min_low - w.t_min_up),
            w.t_max_up + f * (w.t_max_low - w.t_max_up))


def sample_t(step: int, w: TimestepWindow, rng, schedule: DiffusionSchedule | int) -> int:
    """Integer timestep from ``u ~ U(window_at(step))``, rounded half up into [1, T]."""
    T = schedule if isinstance(schedule, int) else schedule.T
    lo, hi = window_at(step, w)
    return continuous_to_step(rng.uniform(lo, hi), T)
