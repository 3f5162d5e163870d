"""Sparsity schedules: masking probability as a function of the gradient-update index."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np

from .errors import InvalidProbability, StepOutOfRange

__all__ = ["ScheduleKind", "SparsitySchedule", "sparsity_at"]


class ScheduleKind(str, Enum):
    CONSTANT = "constant"
    LINEAR = "linear"
    STEP = "step"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class SparsitySchedule:
    """Masking-probability schedule over ``total_steps`` gradient updates.

    ``p_end`` is ignored for constant schedules and ``num_segments`` for all but
    step schedules. Either direction (``p_start`` above or below ``p_end``) works.
    """

    kind: ScheduleKind
    p_start: float
    p_end: float = 0.0
    total_steps: int = 1
    num_segments: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        for name in ("p_start", "p_end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidProbability(f"{name} must lie in [0, 1], got {v}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.num_segments < 1:
            raise ValueError(f"num_segments must be >= 1, got {self.num_segments}")

    @classmethod
    def constant(cls, p: float, total_steps: int = 1) -> "SparsitySchedule":
        return cls(ScheduleKind.CONSTANT, p, p, total_steps)

    @classmethod
    def linear(cls, p_start: float, p_end: float, total_steps: int = 1) -> "SparsitySchedule":
        return cls(ScheduleKind.LINEAR, p_start, p_end, total_steps)

    @classmethod
    def step(cls, p_start: float, p_end: float, num_segments: int, total_steps: int = 1) -> "SparsitySchedule":
        return cls(ScheduleKind.STEP, p_start, p_end, total_steps, num_segments)

    @classmethod
    def exponential(cls, p_start: float, p_end: float, total_steps: int = 1) -> "SparsitySchedule":
        return cls(ScheduleKind.EXPONENTIAL, p_start, p_end, total_steps)

    def with_total_steps(self, total_steps: int) -> "SparsitySchedule":
        return SparsitySchedule(self.kind, self.p_start, self.p_end, total_steps, self.num_segments)

    def __call__(self, t: int) -> float:
        return sparsity_at(self, t)

    def trace(self) -> np.ndarray:
        """Values for every t in ``0 .. total_steps``."""
        return np.array([sparsity_at(self, t) for t in range(self.total_steps + 1)])

    def to_config(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "p_start": self.p_start,
            "p_end": self.p_end,
            "segments": self.num_segments,
        }

    @classmethod
    def from_config(cls, cfg: dict[str, Any], total_steps: int) -> "SparsitySchedule":
        """Build from the JSON fragment used in training configs.

        ``total_steps`` comes from the training plan, not the fragment.
        """
        kind = ScheduleKind(str(cfg["kind"]).lower())
        p_start = float(cfg["p_start"])
        p_end = float(cfg.get("p_end", p_start))
        return cls(kind, p_start, p_end, int(total_steps), int(cfg.get("segments", 1)))


def sparsity_at(s: SparsitySchedule, t: int) -> float:
    if not 0 <= t <= s.total_steps:
        raise StepOutOfRange(f"step {t} outside [0, {s.total_steps}]")
    T = s.total_steps
    span = s.p_end - s.p_start
    if s.kind is ScheduleKind.CONSTANT:
        p = s.p_start
    elif s.kind is ScheduleKind.LINEAR:
        p = s.p_start + (t / T) * span
    elif s.kind is ScheduleKind.STEP:
        N = s.num_segments
        i = min(t * N // T + 1, N)
        p = s.p_start + (i - 1) * span / N
    else:
        p = s.p_start + span * (1.0 - math.exp(-t / T))
    return min(max(p, 0.0), 1.0)
