"""Clock abstractions.

Every component that reasons about time takes a clock object so tests can
advance time deterministically instead of sleeping. Production components use
:class:`WallClock` (monotonic seconds).
"""

from __future__ import annotations

import threading
import time
from typing import Protocol, runtime_checkable


@runtime_checkable
class Clock(Protocol):
    def now(self) -> float:
        """Current time in seconds. Only differences are meaningful."""
        ...

    def sleep(self, seconds: float) -> None:
        """Block (or simulate blocking) for *seconds*."""
        ...


class WallClock:
    """Monotonic wall clock."""

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class ManualClock:
    """Test clock; time moves only when advance() (or sleep()) is called."""

    def __init__(self, start: float = 0.0) -> None:
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("cannot advance a clock backwards")
        with self._lock:
            self._now += seconds
            return self._now

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self.advance(seconds)
