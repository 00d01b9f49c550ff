"""Timers used for convergence and UQ timing.

``WallClock`` reports seconds. ``StepClock`` reports work units (windows
pushed through a model) so that timing columns are reproducible bit for bit.
"""

from __future__ import annotations

import time


class WallClock:
    kind = "wall"

    def now(self) -> float:
        return time.perf_counter()

    def tick(self, n: int = 1) -> None:
        pass


class StepClock:
    kind = "steps"

    def __init__(self):
        self.count = 0

    def now(self) -> float:
        return float(self.count)

    def tick(self, n: int = 1) -> None:
        self.count += int(n)


def make_clock(kind: str):
    if kind == "wall":
        return WallClock()
    if kind == "steps":
        return StepClock()
    raise ValueError(f"unknown clock {kind!r}")
