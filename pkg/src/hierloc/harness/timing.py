"""Wall-clock measurement of pipeline stages in milliseconds."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class StageTiming:
    label: str
    samples_ms: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples_ms)) if self.samples_ms else 0.0

    @property
    def std(self) -> float:
        return float(np.std(self.samples_ms)) if self.samples_ms else 0.0

    def summary(self) -> dict:
        return {"mean_ms": self.mean, "std_ms": self.std, "count": len(self.samples_ms)}


def time_stage(label: str, thunk: Callable, repeats: int = 1):
    """Run ``thunk`` ``repeats`` times; returns (last result, StageTiming)."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    timing = StageTiming(label)
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        result = thunk()
        timing.samples_ms.append((time.perf_counter_ns() - t0) / 1e6)
    return result, timing


class StageClock:
    """Accumulates timings of named stages across many calls."""

    def __init__(self):
        self.stages: dict[str, StageTiming] = {}

    def run(self, label: str, thunk: Callable):
        result, t = time_stage(label, thunk)
        self.add(label, t.samples_ms[0])
        return result, t.samples_ms[0]

    def add(self, label: str, ms: float) -> None:
        self.stages.setdefault(label, StageTiming(label)).samples_ms.append(ms)

    def summary(self) -> dict:
        return {k: v.summary() for k, v in self.stages.items()}
