"""Per-request lifecycle state on the frontend."""

from __future__ import annotations

import enum
import itertools
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional


class Status(enum.Enum):
    QUEUED = "queued"
    SUBMITTED = "submitted"
    STREAMING = "streaming"
    DONE = "done"
    FAILED = "failed"


@dataclass(eq=False)
class RequestRecord:
    request_id: int
    arrival_time: float
    prompt: list[int]
    max_output: int
    seed: int
    slot_index: int = -1
    output_offset: int = 0
    arrival_seq: int = -1
    status: Status = Status.QUEUED
    tokens_streamed: int = 0
    last_seen_generated: int = 0
    submit_time: Optional[float] = None
    first_token_time: Optional[float] = None
    last_token_time: Optional[float] = None
    tokens: list[int] = field(default_factory=list)
    token_times: list[float] = field(default_factory=list)
    error: Optional[str] = None
    # called with (record, new_ids, now) on delivery and (record, None, now) at the end
    sink: Optional[Callable[["RequestRecord", Optional[list[int]], float], None]] = None

    @property
    def finished(self) -> bool:
        return self.status in (Status.DONE, Status.FAILED)


class RequestTracker:
    def __init__(self) -> None:
        self.records: dict[int, RequestRecord] = {}
        self.by_slot: dict[int, RequestRecord] = {}
        self.urgent: OrderedDict[int, None] = OrderedDict()
        self.lock = threading.Lock()
        self._ids = itertools.count(1)
        self.done_count = 0
        self.failed_count = 0

    def new(self, prompt: list[int], max_output: int, seed: int, now: float, sink=None,
            request_id: Optional[int] = None) -> RequestRecord:
        rid = next(self._ids) if request_id is None else request_id
        rec = RequestRecord(rid, now, list(prompt), max_output, seed, sink=sink)
        with self.lock:
            self.records[rid] = rec
        return rec

    def activate(self, rec: RequestRecord, urgent: bool = True) -> None:
        with self.lock:
            self.by_slot[rec.slot_index] = rec
            if urgent:
                self.urgent[rec.slot_index] = None

    def deliver(self, rec: RequestRecord, ids: list[int], now: float) -> None:
        if not ids:
            return
        if rec.first_token_time is None:
            rec.first_token_time = now
            rec.status = Status.STREAMING
            with self.lock:
                self.urgent.pop(rec.slot_index, None)
        rec.tokens.extend(ids)
        rec.token_times.extend([now] * len(ids))
        rec.tokens_streamed += len(ids)
        rec.last_seen_generated = rec.tokens_streamed
        rec.last_token_time = now
        if rec.sink is not None:
            rec.sink(rec, ids, now)

    def finish(self, rec: RequestRecord, now: float, error: Optional[str] = None) -> None:
        rec.status = Status.FAILED if error else Status.DONE
        rec.error = error
        with self.lock:
            self.by_slot.pop(rec.slot_index, None)
            self.urgent.pop(rec.slot_index, None)
            if error:
                self.failed_count += 1
            else:
                self.done_count += 1
        if rec.sink is not None:
            rec.sink(rec, None, now)

    def abandon(self, rec: RequestRecord, now: float, error: str) -> None:
        """Fail a submitted request; its slot stays tracked until the device completes it."""
        if rec.finished:
            return
        rec.status = Status.FAILED
        rec.error = error
        with self.lock:
            self.urgent.pop(rec.slot_index, None)
            self.failed_count += 1
        if rec.sink is not None:
            rec.sink(rec, None, now)

    def drop(self, rec: RequestRecord) -> None:
        with self.lock:
            self.by_slot.pop(rec.slot_index, None)

    def fail_unsubmitted(self, rec: RequestRecord, now: float, error: str) -> None:
        rec.status = Status.FAILED
        rec.error = error
        with self.lock:
            self.failed_count += 1
        if rec.sink is not None:
            rec.sink(rec, None, now)

    def active_slots(self) -> tuple[list[int], list[int]]:
        """(urgent slots, remaining active slots) snapshot."""
        with self.lock:
            urgent = list(self.urgent)
            rest = [s for s in self.by_slot if s not in self.urgent]
        return urgent, rest
