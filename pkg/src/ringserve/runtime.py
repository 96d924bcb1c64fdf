"""Execution runtimes for the emulated planes.

Every active component (device scheduler, token reader, request submitters,
workload drivers) is written as a generator that yields how long it wants to
wait.  A yielded ``float`` is a relative delay in seconds; a yielded
:class:`At` is an absolute deadline.  The same generator runs under either

* :class:`VirtualRuntime` -- a single-threaded discrete-event loop over a
  virtual clock; bitwise reproducible, used by tests and virtual benchmarks.
* :class:`WallRuntime` -- one OS thread per process, delays realised with
  real sleeps; used for interference experiments and the HTTP server.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
import threading
import time
from dataclasses import dataclass
from typing import Callable, Generator, Optional, Union

logger = logging.getLogger(__name__)

Wait = Union[float, int, "At", None]
Process = Generator[Wait, None, object]


@dataclass(frozen=True)
class At:
    """Absolute wake-up time on the runtime clock."""

    t: float


class VirtualRuntime:
    """Discrete-event loop.  ``jitter > 0`` delays every wake-up by a seeded random
    amount, which shuffles how concurrent processes interleave (stress testing)."""

    mode = "virtual"

    def __init__(self, jitter: float = 0.0, seed: Optional[int] = None) -> None:
        self.jitter = jitter
        self._rng = random.Random(seed)
        self._now = 0.0
        self._heap: list[tuple[float, int, Process, str]] = []
        self._seq = itertools.count()
        self._active = True
        self.events_processed = 0

    def now(self) -> float:
        return self._now

    @property
    def active(self) -> bool:
        return self._active

    def shutdown(self) -> None:
        self._active = False

    def spawn(self, proc: Process, name: str = "proc") -> None:
        start = self._now + (self._rng.random() * self.jitter if self.jitter else 0.0)
        heapq.heappush(self._heap, (start, next(self._seq), proc, name))

    def pending(self) -> int:
        return len(self._heap)

    def run(self, until: Optional[float] = None, stop: Optional[Callable[[], bool]] = None) -> float:
        """Process events until the heap drains, ``until`` passes, or ``stop()`` is true."""
        heap = self._heap
        while heap and self._active:
            if stop is not None and stop():
                break
            t, seq, proc, name = heap[0]
            if until is not None and t > until:
                self._now = until
                break
            heapq.heappop(heap)
            if t > self._now:
                self._now = t
            self.events_processed += 1
            try:
                wait = next(proc)
            except StopIteration:
                continue
            if wait is None:
                wake = self._now
            elif isinstance(wait, At):
                wake = max(self._now, wait.t)
            else:
                if wait < 0:
                    raise ValueError(f"process {name!r} yielded negative delay {wait}")
                wake = self._now + wait
            if self.jitter:
                wake += self._rng.random() * self.jitter
            heapq.heappush(heap, (wake, seq, proc, name))
        return self._now


class WallRuntime:
    """Threads-and-sleeps runtime; ``now()`` is seconds since construction."""

    mode = "wall"

    def __init__(self) -> None:
        self._t0 = time.perf_counter()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.errors: list[BaseException] = []

    def now(self) -> float:
        return time.perf_counter() - self._t0

    @property
    def active(self) -> bool:
        return not self._stop.is_set()

    def shutdown(self) -> None:
        self._stop.set()

    def _sleep_until(self, target: float) -> None:
        delay = target - self.now()
        if delay > 0:
            self._stop.wait(delay)

    def _drive(self, proc: Process, name: str) -> None:
        try:
            for wait in proc:
                if self._stop.is_set():
                    break
                if wait is None:
                    time.sleep(0)
                elif isinstance(wait, At):
                    self._sleep_until(wait.t)
                elif wait > 0:
                    self._stop.wait(wait)
                else:
                    time.sleep(0)
        except BaseException as exc:  # surfaced from run()
            logger.exception("process %s failed", name)
            self.errors.append(exc)
            self._stop.set()

    def spawn(self, proc: Process, name: str = "proc") -> None:
        th = threading.Thread(target=self._drive, args=(proc, name), name=name, daemon=True)
        self._threads.append(th)
        th.start()

    def run(self, until: Optional[float] = None, stop: Optional[Callable[[], bool]] = None,
            check_interval: float = 0.002) -> float:
        while not self._stop.is_set():
            if stop is not None and stop():
                break
            if until is not None and self.now() >= until:
                break
            time.sleep(check_interval)
        if self.errors:
            raise self.errors[0]
        return self.now()

    def join(self, timeout: float = 5.0) -> None:
        self.shutdown()
        deadline = time.perf_counter() + timeout
        for th in self._threads:
            th.join(max(0.0, deadline - time.perf_counter()))


Runtime = Union[VirtualRuntime, WallRuntime]


def make_runtime(mode: str) -> Runtime:
    if mode == "virtual":
        return VirtualRuntime()
    if mode == "wall":
        return WallRuntime()
    raise ValueError(f"unknown runtime mode {mode!r}")
