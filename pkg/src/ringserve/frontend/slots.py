"""Frontend-side slot tracking over a locally cached availability view."""

from __future__ import annotations

import threading

import numpy as np

from ..ring_buffer import META_DTYPE, RingBuffer, SlotState
from ..transport import QueuePair, RegionHandle, Transport


WORD = 64  # slots per bitmap word


class NoFreeSlot(Exception):
    pass


class SlotCache:
    """One availability flag per slot plus a circular-scan hint.

    A free flag may be stale (the slot was taken since the last refresh);
    the reservation attempt catches that.  A taken flag goes stale only
    until the next refresh or local reclaim.
    """

    def __init__(self, capacity: int) -> None:
        self.capacity = capacity
        self.mask = capacity - 1
        self.free = bytearray(b"\x01") * capacity
        self.hint = 0
        self.refresh_age = 0
        self.lock = threading.Lock()
        self.probes = 0  # 64-slot bitmap words touched
        self.flag_probes = 0  # individual flags examined
        self.allocations = 0


class SlotTracker:
    def __init__(self, ring: RingBuffer, transport: Transport, qp: QueuePair,
                 meta_region: RegionHandle) -> None:
        self.ring = ring
        self.transport = transport
        self.qp = qp
        self.meta_region = meta_region
        self.cache = SlotCache(ring.capacity)
        self.held: set[int] = set()
        self.refreshes = 0
        self._buf = np.empty(ring.capacity * META_DTYPE.itemsize, dtype=np.uint8)

    def refresh(self):
        """Generator: one bulk read of the metadata block, then rebuild the free view."""
        task = self.transport.read_task(self.meta_region, 0, self._buf.nbytes, self._buf)
        self.transport.post(self.qp, [task])
        yield from self.transport.wait(self.qp, [task])
        self.apply_snapshot(self._buf.view(META_DTYPE))

    def apply_snapshot(self, snap: np.ndarray) -> None:
        free = snap["state"] == SlotState.EMPTY
        cache = self.cache
        with cache.lock:
            flags = bytearray(free.astype(np.uint8).tobytes())
            for i in self.held:
                flags[i] = 0
            cache.free = flags
            cache.refresh_age = 0
        self.refreshes += 1

    def _scan(self, owner: object) -> int:
        cache = self.cache
        with cache.lock:
            free, cap = cache.free, cache.capacity
            start = cache.hint
            pos = 0  # distance travelled from the hint
            while pos < cap:
                # jump to the next free flag; flags jumped over still count as probes
                j = (start + pos) % cap
                i = free.find(1, j) if j >= start else free.find(1, j, start)
                if i < 0 and j >= start:
                    i = free.find(1, 0, start)
                if i < 0:
                    break
                pos = (i - start) % cap
                free[i] = 0
                if self.ring.try_reserve(i, owner):
                    cache.flag_probes += pos + 1
                    cache.probes += (start % WORD + pos) // WORD + 1
                    cache.hint = (i + 1) & cache.mask
                    cache.allocations += 1
                    self.held.add(i)
                    return i
                # stale-free: the flag is now corrected, keep scanning
                pos += 1
            cache.flag_probes += cap
            cache.probes += -(-cap // WORD)
            cache.refresh_age += 1
        return -1

    def find_free_slot(self, owner: object):
        """Generator returning a reserved slot index; refreshes once before giving up."""
        i = self._scan(owner)
        if i >= 0:
            return i
        yield from self.refresh()
        i = self._scan(owner)
        if i >= 0:
            return i
        raise NoFreeSlot("ring full after refresh")

    def release(self, i: int, owner: object) -> None:
        """Give up a reservation that never reached PREFILL_PENDING."""
        self.ring.release(i, owner)
        self.held.discard(i)
        with self.cache.lock:
            self.cache.free[i] = 1

    def submitted(self, i: int) -> None:
        self.held.discard(i)

    def reclaimed(self, i: int) -> None:
        with self.cache.lock:
            self.cache.free[i] = 1

    @property
    def mean_probes(self) -> float:
        """Bitmap words touched per successful allocation."""
        c = self.cache
        return c.probes / c.allocations if c.allocations else 0.0

    @property
    def mean_flag_probes(self) -> float:
        c = self.cache
        return c.flag_probes / c.allocations if c.allocations else 0.0
