"""Clocks: wall time for live runs, a manually advanced clock for deterministic ones."""

from __future__ import annotations

import time


class SystemClock:
    def now(self) -> int:
        return time.time_ns()

    def sleep(self, ns: int) -> None:
        if ns > 0:
            time.sleep(ns / 1e9)


class VirtualClock:
    """Time only moves when someone sleeps or advances it."""

    def __init__(self, start: int = 0):
        self._now = start

    def now(self) -> int:
        return self._now

    def sleep(self, ns: int) -> None:
        if ns > 0:
            self._now += ns

    def advance_to(self, t: int) -> None:
        if t > self._now:
            self._now = t


MS = 1_000_000
SECOND = 1_000_000_000
