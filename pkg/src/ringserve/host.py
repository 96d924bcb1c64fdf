"""Host round-trip cost model for the host-mediated scheduler placement."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np


@dataclass
class HostOverheadModel:
    """Per-step host cost: device->host copy, batch reassembly, host graph launch.

    ``low_ms``/``high_ms`` bound the uniform reassembly draw; ``multiplier``
    scales every draw (virtual-clock interference).
    """

    low_ms: float = 1.6
    high_ms: float = 7.0
    multiplier: float = 1.0
    pcie_us: float = 10.0
    launch_low_us: float = 11.0
    launch_high_us: float = 17.0

    def sample_reassembly(self, rng: np.random.Generator) -> float:
        return rng.uniform(self.low_ms, self.high_ms) * 1e-3 * self.multiplier

    def sample_launch(self, rng: np.random.Generator) -> float:
        return rng.uniform(self.launch_low_us, self.launch_high_us) * 1e-6

    @property
    def pcie(self) -> float:
        return self.pcie_us * 1e-6


class HostWork:
    """Real CPU work sized to a target duration as measured on an idle machine.

    Under contention the same amount of work takes longer, which is how
    wall-clock interference reaches the host-mediated loop.
    """

    _shared: "HostWork | None" = None
    _shared_lock = threading.Lock()

    def __init__(self, calibrate_for: float = 0.05) -> None:
        self._buf = np.zeros(4096, dtype=np.int64)
        self.rate = self._calibrate(calibrate_for)

    @classmethod
    def shared(cls) -> "HostWork":
        """Process-wide instance, calibrated on first use.  Call it before any
        interference starts, or the calibration absorbs the slowdown."""
        with cls._shared_lock:
            if cls._shared is None:
                cls._shared = cls()
            return cls._shared

    def _spin(self, n: int) -> int:
        acc = 0
        buf = self._buf
        m = len(buf) - 1
        for i in range(n):
            j = (acc + i * 7) & m
            acc = (acc + int(buf[j]) + i) & 0xFFFF
            buf[j] = acc
        return acc

    def _calibrate(self, seconds: float) -> float:
        best = 0.0
        for _ in range(3):
            n = 20000
            t0 = time.perf_counter()
            self._spin(n)
            dt = time.perf_counter() - t0
            best = max(best, n / dt)
        return best

    def run(self, seconds: float) -> None:
        if seconds > 0:
            self._spin(max(1, int(self.rate * seconds)))
