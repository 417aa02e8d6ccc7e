"""Clock sources: real monotonic time or a single-threaded virtual clock."""

from __future__ import annotations

import threading
import time


class WallClock:
    """Monotonic wall clock in seconds."""

    virtual = False

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def sleep_until(self, t: float) -> None:
        # time.sleep can wake marginally early on some kernels
        while True:
            dt = t - time.monotonic()
            if dt <= 0:
                return
            time.sleep(dt)


class VirtualClock:
    """Discrete-event clock: sleeping advances time instantly.

    Only meaningful for single-threaded use; concurrent sleepers would each
    advance the shared time independently.
    """

    virtual = True

    def __init__(self, start: float = 0.0):
        self._t = start
        self._lock = threading.Lock()

    def now(self) -> float:
        return self._t

    def advance(self, seconds: float) -> None:
        if seconds > 0:
            with self._lock:
                self._t += seconds

    def sleep(self, seconds: float) -> None:
        self.advance(seconds)

    def sleep_until(self, t: float) -> None:
        with self._lock:
            if t > self._t:
                self._t = t


WALL = WallClock()


def now_ns() -> int:
    """Process-shared monotonic timestamp used by event logs."""
    return time.monotonic_ns()
