"""Cache-line-packed storage for BPE merge rules and symbol lists."""

from __future__ import annotations

import math
from typing import Iterable, Optional

import numpy as np

CACHE_LINE = 64
ENTRY_DTYPE = np.dtype([("left", "<u4"), ("right", "<u4"), ("merged", "<u4"), ("rank", "<u4")])
ENTRIES_PER_BUCKET = CACHE_LINE // ENTRY_DTYPE.itemsize
NODE_DTYPE = np.dtype([("id", "<i4"), ("prev", "<i4"), ("next", "<i4"), ("length", "<i4")])
EMPTY = 0xFFFFFFFF
MAX_LOAD = 0.7
_HASH_MUL = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1

assert ENTRY_DTYPE.itemsize == 16 and ENTRIES_PER_BUCKET == 4
assert NODE_DTYPE.itemsize == 16


def aligned_empty(nbytes: int, align: int = CACHE_LINE) -> np.ndarray:
    """Uninitialised uint8 buffer whose first byte sits on an ``align`` boundary."""
    raw = np.empty(nbytes + align, dtype=np.uint8)
    off = (-raw.ctypes.data) % align
    return raw[off:off + nbytes]


class DuplicateMerge(ValueError):
    pass


class MergeTable:
    """Open-addressed hash of (left, right) -> (merged, rank).

    Buckets are one cache line each (four 16-byte entries); probing walks the
    entries of the home bucket and then continues into the next bucket.
    """

    def __init__(self, merges: Iterable[tuple[int, int, int]] = ()) -> None:
        merges = list(merges)
        n_buckets = 1
        while n_buckets * ENTRIES_PER_BUCKET * MAX_LOAD < max(1, len(merges)):
            n_buckets *= 2
        self.n_buckets = n_buckets
        self._shift = 64 - max(1, int(math.log2(n_buckets))) if n_buckets > 1 else 64
        raw = aligned_empty(n_buckets * CACHE_LINE)
        raw[:] = 0xFF
        self.buckets = raw.view(ENTRY_DTYPE).reshape(n_buckets, ENTRIES_PER_BUCKET)
        # flat u32 words over the same memory for scalar probing
        self._w = memoryview(raw).cast("I")
        self.size = 0
        for rank, (left, right, merged) in enumerate(merges):
            self.insert(left, right, merged, rank)

    @property
    def load_factor(self) -> float:
        return self.size / (self.n_buckets * ENTRIES_PER_BUCKET)

    @property
    def address(self) -> int:
        return self.buckets.ctypes.data

    def _home(self, left: int, right: int) -> int:
        if self.n_buckets == 1:
            return 0
        return ((((left << 32) | right) * _HASH_MUL) & _MASK64) >> self._shift

    def insert(self, left: int, right: int, merged: int, rank: int) -> None:
        if (self.size + 1) > self.n_buckets * ENTRIES_PER_BUCKET * MAX_LOAD:
            raise OverflowError("merge table is full; size it for all merges up front")
        w = self._w
        mask = self.n_buckets - 1
        b = self._home(left, right)
        while True:
            base = b * 16
            for e in range(0, 16, 4):
                k = base + e
                if w[k] == EMPTY:
                    w[k], w[k + 1], w[k + 2], w[k + 3] = left, right, merged, rank
                    self.size += 1
                    return
                if w[k] == left and w[k + 1] == right:
                    raise DuplicateMerge(f"pair ({left}, {right}) already present")
            b = (b + 1) & mask

    def lookup(self, left: int, right: int) -> Optional[tuple[int, int]]:
        w = self._w
        mask = self.n_buckets - 1
        b = self._home(left, right)
        while True:
            base = b * 16
            for e in range(0, 16, 4):
                k = base + e
                wl = w[k]
                if wl == EMPTY:
                    return None
                if wl == left and w[k + 1] == right:
                    return w[k + 2], w[k + 3]
            b = (b + 1) & mask


class SymbolScratch:
    """Per-worker symbol-node array reused across encodes.

    ``allocations`` counts every (re)allocation of the backing store; it
    stays flat once the array has grown to the longest piece seen.
    """

    def __init__(self, capacity: int = 256) -> None:
        self.allocations = 0
        self.capacity = 0
        self._grow(capacity)

    def _grow(self, capacity: int) -> None:
        raw = aligned_empty(capacity * NODE_DTYPE.itemsize, 16)
        self.nodes = raw.view(NODE_DTYPE)
        self.words = memoryview(raw).cast("i")
        self.ranks = [0] * capacity
        self.capacity = capacity
        self.allocations += 1

    def ensure(self, n: int) -> None:
        if n > self.capacity:
            cap = self.capacity
            while cap < n:
                cap *= 2
            self._grow(cap)
