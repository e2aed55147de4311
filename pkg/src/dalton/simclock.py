"""Simulated-time event scheduler with wall-clock pacing.

Events run in (time, insertion) order on the caller's thread. `speed` maps
simulated seconds to wall seconds (60 = one sim minute per wall second);
speed 0 runs as fast as the CPU allows. All service timeouts in this package
are expressed in simulated milliseconds, so compressing time compresses them
too.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from typing import Callable, Optional

__all__ = ["SimClock"]


class SimClock:
    def __init__(self, start_ms: int = 0, speed: float = 0.0) -> None:
        if speed < 0:
            raise ValueError("speed must be >= 0")
        self._now_ms = int(start_ms)
        self.speed = speed
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._counter = itertools.count()
        self._stop = threading.Event()

    def now_ms(self) -> int:
        return self._now_ms

    def call_at(self, t_ms: int, fn: Callable[[], None]) -> None:
        if t_ms < self._now_ms:
            raise ValueError(f"cannot schedule in the past ({t_ms} < {self._now_ms})")
        heapq.heappush(self._heap, (int(t_ms), next(self._counter), fn))

    def call_later(self, delay_ms: int, fn: Callable[[], None]) -> None:
        self.call_at(self._now_ms + int(delay_ms), fn)

    def stop(self) -> None:
        """Ask run_until to return after the current event."""
        self._stop.set()

    def run_until(self, t_end_ms: int) -> None:
        """Run due events, advancing simulated time to exactly t_end_ms."""
        wall_anchor = time.monotonic()
        sim_anchor = self._now_ms
        while not self._stop.is_set():
            if not self._heap or self._heap[0][0] > t_end_ms:
                self._advance(t_end_ms, wall_anchor, sim_anchor)
                return
            t_next = self._heap[0][0]
            self._advance(t_next, wall_anchor, sim_anchor)
            # run everything due at t_next before peeking again
            while self._heap and self._heap[0][0] <= self._now_ms:
                _, _, fn = heapq.heappop(self._heap)
                fn()
                if self._stop.is_set():
                    return

    def _advance(self, t_ms: int, wall_anchor: float, sim_anchor: int) -> None:
        if self.speed > 0 and t_ms > self._now_ms:
            # pace against the anchor, not cumulative sleeps, to avoid drift;
            # sleep in slices so stop() stays responsive
            target_wall = wall_anchor + (t_ms - sim_anchor) / 1000.0 / self.speed
            while not self._stop.is_set():
                delay = target_wall - time.monotonic()
                if delay <= 0:
                    break
                time.sleep(min(delay, 0.2))
        self._now_ms = max(self._now_ms, int(t_ms))
