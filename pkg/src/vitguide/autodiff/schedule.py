from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup followed by cosine decay from ``base_lr`` to ``final_lr``."""

    base_lr: float = 5e-4
    final_lr: float = 5e-6
    warmup_steps: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} outside [0, {self.total_steps}]")

    def __call__(self, step: int) -> float:
        return lr_at(self, step)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at optimizer step ``step`` (0-based).

    Warmup steps use ``base_lr * (step + 1) / warmup_steps`` so the very first
    update is not wasted at lr 0 and the ramp meets ``base_lr`` at the boundary.
    """
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    warm = schedule.warmup_steps
    if step < warm:
        return schedule.base_lr * (step + 1) / warm
    span = schedule.total_steps - warm
    if span == 0:
        return schedule.final_lr
    progress = (step - warm) / span
    return schedule.final_lr + 0.5 * (schedule.base_lr - schedule.final_lr) * (1.0 + math.cos(math.pi * progress))
