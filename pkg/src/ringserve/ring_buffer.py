"""The shared slot ring: a fixed slot array plus input/output token arenas.

Per-slot metadata lives in two numpy structured arrays.  ``meta`` holds the
fields the frontend polls (state, generated count, request id) packed at
16 bytes per slot, so its raw bytes *are* the metadata block that the token
reader fetches in one bulk read.  ``desc`` holds the submission descriptor
(arena coordinates, budget, seed, admission sequence).

State changes go through :meth:`RingBuffer.transition`, a compare-and-swap
guarded by striped locks.  Writers store payload first and flip the state
last; readers load the state first.
"""

from __future__ import annotations

import bisect
import enum
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class SlotState(enum.IntEnum):
    EMPTY = 0
    PREFILL_PENDING = 1
    PREFILL_PROCESSING = 2
    DECODE_PROCESSING = 3
    DECODE_PAUSED = 4
    DECODE_COMPLETED = 5


class Plane(enum.Enum):
    FRONTEND = "frontend"
    DEVICE = "device"


S = SlotState

#: (expected, next) -> plane allowed to perform the edge
LEGAL_TRANSITIONS: dict[tuple[SlotState, SlotState], Plane] = {
    (S.EMPTY, S.PREFILL_PENDING): Plane.FRONTEND,
    (S.PREFILL_PENDING, S.PREFILL_PROCESSING): Plane.DEVICE,
    (S.PREFILL_PROCESSING, S.DECODE_PROCESSING): Plane.DEVICE,
    (S.DECODE_PROCESSING, S.DECODE_PAUSED): Plane.DEVICE,
    (S.DECODE_PAUSED, S.DECODE_PROCESSING): Plane.DEVICE,
    (S.DECODE_PROCESSING, S.DECODE_COMPLETED): Plane.DEVICE,
    (S.DECODE_COMPLETED, S.EMPTY): Plane.FRONTEND,
}

META_DTYPE = np.dtype([("state", "<u4"), ("generated", "<u4"), ("request_id", "<u8")])
DESC_DTYPE = np.dtype([
    ("input_offset", "<u4"),
    ("input_len", "<u4"),
    ("output_offset", "<u4"),
    ("output_capacity", "<u4"),
    ("max_output", "<u4"),
    ("flags", "<u4"),
    ("sampling_seed", "<u8"),
    ("arrival_seq", "<u8"),
])
TOKEN_DTYPE = np.dtype("<u4")
TOKEN_BYTES = TOKEN_DTYPE.itemsize

assert META_DTYPE.itemsize == 16


class RingError(Exception):
    pass


class InvalidSize(RingError, ValueError):
    pass


class IllegalTransition(RingError):
    pass


class EmptyPrompt(RingError, ValueError):
    pass


class ArenaExhausted(RingError):
    pass


class CapacityExceeded(RingError):
    pass


class ExtentAllocator:
    """First-fit allocator over ``[0, size)`` with coalescing frees."""

    def __init__(self, size: int) -> None:
        self.size = size
        self._starts = [0]
        self._lengths = [size]
        self._lock = threading.Lock()

    @property
    def free_total(self) -> int:
        return sum(self._lengths)

    def alloc(self, n: int) -> int:
        with self._lock:
            for i, length in enumerate(self._lengths):
                if length >= n:
                    off = self._starts[i]
                    if length == n:
                        del self._starts[i], self._lengths[i]
                    else:
                        self._starts[i] += n
                        self._lengths[i] -= n
                    return off
        raise ArenaExhausted(f"no contiguous range of {n} tokens (free={self.free_total})")

    def free(self, off: int, n: int) -> None:
        if n == 0:
            return
        with self._lock:
            i = bisect.bisect_left(self._starts, off)
            self._starts.insert(i, off)
            self._lengths.insert(i, n)
            # merge with successor, then predecessor
            if i + 1 < len(self._starts) and off + n == self._starts[i + 1]:
                self._lengths[i] += self._lengths.pop(i + 1)
                self._starts.pop(i + 1)
            if i > 0 and self._starts[i - 1] + self._lengths[i - 1] == off:
                self._lengths[i - 1] += self._lengths.pop(i)
                self._starts.pop(i)


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


class RingBuffer:
    def __init__(self, capacity: int = 4096, input_arena_tokens: int = 1 << 20,
                 output_arena_tokens: int = 1 << 20, n_locks: int = 64) -> None:
        if not _is_pow2(capacity):
            raise InvalidSize(f"capacity must be a power of two, got {capacity}")
        if input_arena_tokens <= 0 or output_arena_tokens <= 0:
            raise InvalidSize("arena sizes must be positive")
        self.capacity = capacity
        self.mask = capacity - 1
        self.meta = np.zeros(capacity, dtype=META_DTYPE)
        self.desc = np.zeros(capacity, dtype=DESC_DTYPE)
        self.input_arena = np.zeros(input_arena_tokens, dtype=TOKEN_DTYPE)
        self.output_arena = np.zeros(output_arena_tokens, dtype=TOKEN_DTYPE)
        # field views avoid re-resolving the structured field on every access
        self._state = self.meta["state"]
        self._generated = self.meta["generated"]
        self._locks = [threading.Lock() for _ in range(min(n_locks, capacity))]
        self._owner: list[Optional[object]] = [None] * capacity
        self._input_alloc = ExtentAllocator(input_arena_tokens)
        self._output_alloc = ExtentAllocator(output_arena_tokens)
        self._ranges: dict[int, tuple[int, int, int, int]] = {}
        self.observer: Optional[Callable[[int, SlotState, SlotState, Plane], None]] = None

    # -- memory regions exposed to the transport -------------------------------
    def regions(self) -> dict[str, np.ndarray]:
        """Byte views of every region the frontend may touch one-sidedly."""
        return {
            "meta": self.meta.view(np.uint8),
            "desc": self.desc.view(np.uint8),
            "input": self.input_arena.view(np.uint8),
            "output": self.output_arena.view(np.uint8),
        }

    # -- state machine ---------------------------------------------------------
    def state(self, i: int) -> SlotState:
        return SlotState(int(self._state[i]))

    def generated(self, i: int) -> int:
        return int(self._generated[i])

    def try_reserve(self, i: int, owner: object) -> bool:
        """Atomically take exclusive write access to an EMPTY slot.

        The reservation guards the payload-write window before the
        EMPTY -> PREFILL_PENDING flip; it is invisible in the metadata block.
        """
        with self._locks[i % len(self._locks)]:
            if self._state[i] != S.EMPTY or self._owner[i] is not None:
                return False
            self._owner[i] = owner
            return True

    def release(self, i: int, owner: object) -> None:
        with self._locks[i % len(self._locks)]:
            if self._owner[i] is owner:
                self._owner[i] = None

    def owner(self, i: int) -> Optional[object]:
        return self._owner[i]

    def transition(self, i: int, expected: SlotState, nxt: SlotState, actor: Plane,
                   owner: Optional[object] = None) -> bool:
        allowed = LEGAL_TRANSITIONS.get((expected, nxt))
        if allowed is None:
            raise IllegalTransition(f"{expected.name} -> {nxt.name} is not a legal edge")
        if allowed is not actor:
            raise IllegalTransition(f"{actor.value} may not perform {expected.name} -> {nxt.name}")
        with self._locks[i % len(self._locks)]:
            if self._state[i] != expected:
                return False
            if expected is S.EMPTY:
                held = self._owner[i]
                if held is not None and held is not owner:
                    return False
                self._owner[i] = None
            elif expected is S.DECODE_COMPLETED:
                self._reset_slot(i)
            self._state[i] = nxt
        if self.observer is not None:
            self.observer(i, expected, nxt, actor)
        return True

    def _reset_slot(self, i: int) -> None:
        self.release_ranges(i)
        self._generated[i] = 0
        self.meta["request_id"][i] = 0
        self.desc[i] = 0

    # -- arena management ------------------------------------------------------
    def allocate_ranges(self, i: int, n_input: int, n_output: int) -> tuple[int, int]:
        if i in self._ranges:
            self.release_ranges(i)
        in_off = self._input_alloc.alloc(n_input)
        try:
            out_off = self._output_alloc.alloc(n_output)
        except ArenaExhausted:
            self._input_alloc.free(in_off, n_input)
            raise
        self._ranges[i] = (in_off, n_input, out_off, n_output)
        return in_off, out_off

    def release_ranges(self, i: int) -> None:
        rng = self._ranges.pop(i, None)
        if rng is not None:
            in_off, n_in, out_off, n_out = rng
            self._input_alloc.free(in_off, n_in)
            self._output_alloc.free(out_off, n_out)

    def arena_free(self) -> tuple[int, int]:
        return self._input_alloc.free_total, self._output_alloc.free_total

    def prompt_writes(self, i: int, tokens: Sequence[int], max_output: int, seed: int,
                      request_id: int = 0, arrival_seq: int = 0) -> list[tuple[str, int, bytes]]:
        """Allocate arena ranges for slot ``i`` and return the byte writes that submit it.

        Writes are ordered payload first; the caller flips the state afterwards.
        """
        if len(tokens) == 0:
            raise EmptyPrompt("prompt must contain at least one token")
        if max_output < 1:
            raise ValueError("max_output must be >= 1")
        in_off, out_off = self.allocate_ranges(i, len(tokens), max_output)
        desc = np.zeros(1, dtype=DESC_DTYPE)
        desc["input_offset"] = in_off
        desc["input_len"] = len(tokens)
        desc["output_offset"] = out_off
        desc["output_capacity"] = max_output
        desc["max_output"] = max_output
        desc["sampling_seed"] = seed & 0xFFFFFFFFFFFFFFFF
        desc["arrival_seq"] = arrival_seq
        rid = np.array([request_id & 0xFFFFFFFFFFFFFFFF], dtype="<u8")
        return [
            ("input", in_off * TOKEN_BYTES, np.asarray(tokens, dtype=TOKEN_DTYPE).tobytes()),
            ("desc", i * DESC_DTYPE.itemsize, desc.tobytes()),
            ("meta", i * META_DTYPE.itemsize + 8, rid.tobytes()),
        ]

    def apply_writes(self, writes: Iterable[tuple[str, int, bytes]]) -> None:
        regions = self.regions()
        for name, off, payload in writes:
            regions[name][off:off + len(payload)] = np.frombuffer(payload, dtype=np.uint8)

    def write_prompt(self, i: int, tokens: Sequence[int], max_output: int, seed: int,
                     request_id: int = 0, arrival_seq: int = 0) -> None:
        """Local-memory form of the prompt submission payload write."""
        if self.state(i) is not S.EMPTY:
            raise RingError(f"slot {i} is not EMPTY")
        self.apply_writes(self.prompt_writes(i, tokens, max_output, seed, request_id, arrival_seq))

    def prompt(self, i: int) -> np.ndarray:
        off = int(self.desc["input_offset"][i])
        return self.input_arena[off:off + int(self.desc["input_len"][i])]

    # -- device-side token publication ----------------------------------------
    def publish_tokens(self, i: int, new_tokens: Sequence[int]) -> None:
        st = self._state[i]
        if st != S.DECODE_PROCESSING and st != S.PREFILL_PROCESSING:
            raise RingError(f"slot {i} in {SlotState(int(st)).name} cannot publish")
        gen = int(self._generated[i])
        k = len(new_tokens)
        cap = int(self.desc["output_capacity"][i])
        if gen + k > cap:
            raise CapacityExceeded(f"slot {i}: {gen}+{k} exceeds output capacity {cap}")
        off = int(self.desc["output_offset"][i]) + gen
        self.output_arena[off:off + k] = new_tokens
        # count becomes visible only after the token words are in place
        self._generated[i] = gen + k

    def published(self, i: int) -> np.ndarray:
        off = int(self.desc["output_offset"][i])
        return self.output_arena[off:off + int(self._generated[i])]

    # -- bulk metadata ---------------------------------------------------------
    def snapshot_metadata(self) -> np.ndarray:
        """Copy of the per-slot (state, generated, request_id) block; 16 bytes per slot."""
        return self.meta.copy()

    def pending_slots(self) -> np.ndarray:
        return np.flatnonzero(self._state == S.PREFILL_PENDING)


def decode_snapshot(raw: bytes | np.ndarray) -> np.ndarray:
    """Parse the little-endian wire form of the metadata block."""
    return np.frombuffer(bytes(raw) if not isinstance(raw, np.ndarray) else raw.tobytes(),
                         dtype=META_DTYPE)
