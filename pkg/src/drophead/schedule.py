"""Dropout-rate trajectories and the warmup learning-rate curve.

All schedules are piecewise linear in the optimizer step:

* ``v_shaped``: ``p_start`` at step 0 down to 0 at ``warmup_steps``, then up
  to ``p_end`` at ``total_steps``.
* ``constant``: ``p_end`` everywhere.
* ``curriculum``: 0 at step 0 up to ``p_end`` at ``total_steps``.
* ``anti_curriculum``: ``p_start`` at step 0 down to 0 at ``total_steps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

V_SHAPED = "v_shaped"
CONSTANT = "constant"
CURRICULUM = "curriculum"
ANTI_CURRICULUM = "anti_curriculum"
KINDS = (V_SHAPED, CONSTANT, CURRICULUM, ANTI_CURRICULUM)


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = V_SHAPED
    p_start: float = 0.2
    p_end: float = 0.2
    warmup_steps: int = 4000
    total_steps: int = 100000

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        for name in ("p_start", "p_end"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {p}")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be positive")
        if self.total_steps <= self.warmup_steps:
            raise ValueError(f"total_steps ({self.total_steps}) must exceed warmup_steps ({self.warmup_steps})")

    @property
    def max_rate(self) -> float:
        return max(self.p_start, self.p_end)


def _lerp(a: float, b: float, t: int, t0: int, t1: int) -> float:
    # Endpoints are returned verbatim so breakpoints are exact.
    if t == t0:
        return a
    if t == t1:
        return b
    return a + (b - a) * ((t - t0) / (t1 - t0))


def drop_rate_at(spec: ScheduleSpec, step: int) -> float:
    """DropHead rate to use at optimizer step ``step`` (0-based)."""
    if step < 0 or step > spec.total_steps:
        raise ValueError(f"step {step} outside [0, {spec.total_steps}]")
    T, Tw = spec.total_steps, spec.warmup_steps
    if spec.kind == CONSTANT:
        return spec.p_end
    if spec.kind == CURRICULUM:
        return _lerp(0.0, spec.p_end, step, 0, T)
    if spec.kind == ANTI_CURRICULUM:
        return _lerp(spec.p_start, 0.0, step, 0, T)
    if step <= Tw:
        return _lerp(spec.p_start, 0.0, step, 0, Tw)
    return _lerp(0.0, spec.p_end, step, Tw, T)


def learning_rate_at(base_lr: float, warmup_steps: int, step: int) -> float:
    """Linear warmup to ``base_lr`` at ``warmup_steps``, then inverse-sqrt decay."""
    if warmup_steps < 1:
        raise ValueError("warmup_steps must be at least 1")
    if step <= warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * math.sqrt(warmup_steps / step)
