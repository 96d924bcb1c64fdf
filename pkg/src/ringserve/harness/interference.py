"""Noisy-neighbour CPU load.

Wall-clock mode starts hog *processes* (threads would serialise on the
interpreter lock and barely perturb anything).  Each walks a 64 MiB buffer
with strided read-modify-write passes whose stores depend on what was read,
so it competes for cores, caches and memory bandwidth.  Virtual mode only
scales the host overhead model.
"""

from __future__ import annotations

import multiprocessing as mp
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..host import HostWork

HOG_BYTES = 64 << 20
_CHUNK = 1 << 20
_STRIDE = 4096 + 64  # defeats simple prefetching across pages


def _hog(stop, nbytes: int, seed: int) -> None:
    rng = np.random.default_rng(seed)
    buf = rng.integers(0, 256, size=nbytes, dtype=np.uint8)
    words = buf.view(np.uint32)
    n = len(words)
    off = 0
    while not stop.is_set():
        for _ in range(64):
            idx = (off + np.arange(_CHUNK // 4, dtype=np.int64) * (_STRIDE // 4)) % n
            w = words[idx]
            words[idx] = (w * np.uint32(2654435761)) ^ (w >> np.uint32(7)) ^ np.uint32(off)
            off = (off + int(w[0]) % 4093 + 1) % n


@dataclass
class Interferer:
    threads: int
    mode: str
    host_multiplier: float = 1.0
    procs: list = field(default_factory=list)
    _stop: Optional[object] = None

    @property
    def running(self) -> bool:
        return any(p.is_alive() for p in self.procs)

    def stop(self) -> None:
        if self._stop is not None:
            self._stop.set()
        for p in self.procs:
            p.join(timeout=5)
            if p.is_alive():
                p.terminate()
                p.join(timeout=1)
        self.procs.clear()

    def __enter__(self) -> "Interferer":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def inject_interference(threads: int, mode: str = "wall", multiplier: float = 3.0,
                        nbytes: int = HOG_BYTES) -> Interferer:
    """Start ``threads`` hogs (wall) or return a ``multiplier`` on host overheads (virtual)."""
    if threads < 1:
        raise ValueError("interference needs at least one hog")
    if mode == "virtual":
        return Interferer(threads, mode, host_multiplier=multiplier)
    if mode != "wall":
        raise ValueError(f"unknown interference mode {mode!r}")
    HostWork.shared()  # calibrate while the machine is still quiet
    ctx = mp.get_context("fork" if hasattr(os, "fork") else "spawn")
    stop = ctx.Event()
    procs = [ctx.Process(target=_hog, args=(stop, nbytes, k), daemon=True, name=f"hog-{k}")
             for k in range(threads)]
    for p in procs:
        p.start()
    return Interferer(threads, mode, procs=procs, _stop=stop)


def default_hog_count() -> int:
    return 2 * (os.cpu_count() or 1)
