"""SGD with momentum and the two-phase cosine one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from tame.autodiff import Tensor


@dataclass(frozen=True)
class OneCycle:
    """Shape of the one-cycle schedule, relative to ``max_lr``."""

    start_div: float = 25.0
    final_div: float = 1e4
    peak_fraction: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.peak_fraction < 1.0:
            raise ValueError("peak_fraction must lie in (0, 1)")
        if self.start_div <= 0 or self.final_div <= 0:
            raise ValueError("start_div and final_div must be positive")


def _cos_anneal(start: float, end: float, pct: float) -> float:
    return end + (start - end) * (math.cos(math.pi * pct) + 1.0) / 2.0


def peak_step(total_steps: int, schedule: OneCycle) -> int:
    return min(max(round(schedule.peak_fraction * total_steps), 1), total_steps - 1)


def one_cycle_lr(step: int, total_steps: int, max_lr: float, schedule: OneCycle = OneCycle()) -> float:
    """Learning rate at ``step`` of ``total_steps``.

    Rises from ``max_lr / start_div`` at step 0 to ``max_lr`` at
    ``round(peak_fraction * total_steps)``, then falls to ``max_lr / final_div``
    at the last step.  Both phases are cosine shaped.
    """
    if total_steps < 1 or not 0 <= step < total_steps:
        raise IndexError(f"step {step} outside schedule of {total_steps} steps")
    if max_lr <= 0:
        raise ValueError("max_lr must be positive")
    start = max_lr / schedule.start_div
    if total_steps == 1:
        return start
    peak = peak_step(total_steps, schedule)
    if step <= peak:
        return _cos_anneal(start, max_lr, step / peak)
    last = total_steps - 1
    return _cos_anneal(max_lr, max_lr / schedule.final_div, (step - peak) / (last - peak))


class OneCycleSchedule:
    """Stateful iterator over the schedule; each learning rate is handed out exactly once."""

    def __init__(self, total_steps: int, max_lr: float, schedule: OneCycle = OneCycle()):
        self.total_steps = total_steps
        self.max_lr = max_lr
        self.schedule = schedule
        self.consumed: list[float] = []

    def __iter__(self):
        return self

    def __next__(self) -> float:
        step = len(self.consumed)
        if step >= self.total_steps:
            raise StopIteration
        lr = one_cycle_lr(step, self.total_steps, self.max_lr, self.schedule)
        self.consumed.append(lr)
        return lr


class SGD:
    """Heavy-ball SGD: ``v = m*v + g (+ wd*p)``, ``p -= lr * v``."""

    def __init__(self, params: Iterable[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= np.asarray(lr, dtype=p.dtype) * v
