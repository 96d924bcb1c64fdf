"""Frontend plane: prompt submission over one-sided writes plus the token reader."""

from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

from ..ring_buffer import ArenaExhausted, Plane, RingBuffer, SlotState
from ..runtime import At, Runtime
from ..transport import TransferTask, Transport
from .reader import PollConfig, TokenReader
from .slots import NoFreeSlot, SlotTracker
from .tracker import RequestRecord, RequestTracker, Status

logger = logging.getLogger(__name__)


@dataclass
class FrontendConfig:
    poll: PollConfig = field(default_factory=PollConfig)
    coalesce_us: float = 100.0


@dataclass(eq=False)
class _Batch:
    deadline: float
    tasks: list[TransferTask] = field(default_factory=list)
    posted: bool = False


class SubmitCoalescer:
    """Groups prompt writes that arrive within one window into a single post."""

    def __init__(self, transport: Transport, qp, runtime: Runtime, window_us: float) -> None:
        self.transport = transport
        self.qp = qp
        self.rt = runtime
        self.window = window_us * 1e-6
        self._open: Optional[_Batch] = None
        self._lock = threading.Lock()
        self.posts = 0

    def submit(self, tasks: list[TransferTask]):
        """Generator: returns once ``tasks`` have completed."""
        with self._lock:
            batch = self._open
            leader = batch is None
            if leader:
                batch = self._open = _Batch(self.rt.now() + self.window)
            batch.tasks.extend(tasks)
        if leader:
            if self.window > 0:
                yield At(batch.deadline)
            with self._lock:
                self._open = None
            self.transport.post(self.qp, batch.tasks)
            self.posts += 1
            batch.posted = True
        else:
            while not batch.posted:
                yield At(batch.deadline) if self.rt.now() < batch.deadline else 1e-6
        yield from self.transport.wait(self.qp, tasks)


class Frontend:
    def __init__(self, ring: RingBuffer, transport: Transport, runtime: Runtime,
                 config: Optional[FrontendConfig] = None) -> None:
        self.ring = ring
        self.transport = transport
        self.rt = runtime
        self.cfg = config or FrontendConfig()
        self.regions = {
            name: transport.register_region(mem, name=name, plane=Plane.DEVICE)
            for name, mem in ring.regions().items()
        }
        # separate staging paths for prompt writes and result reads
        self.qp_submit = transport.create_qp("submit")
        self.qp_read = transport.create_qp("read")
        self.tracker = RequestTracker()
        self.slots = SlotTracker(ring, transport, self.qp_read, self.regions["meta"])
        self.reader = TokenReader(ring, transport, self.qp_read, self.regions, self.tracker,
                                  self.slots, runtime, self.cfg.poll)
        self.coalescer = SubmitCoalescer(transport, self.qp_submit, runtime, self.cfg.coalesce_us)
        self._arrival_seq = itertools.count()
        self._seq_lock = threading.Lock()

    def new_request(self, prompt: Sequence[int], max_output: int, seed: int, sink=None,
                    request_id: Optional[int] = None) -> RequestRecord:
        return self.tracker.new(list(prompt), max_output, seed, self.rt.now(), sink, request_id)

    def submit(self, rec: RequestRecord):
        """Generator: claim a slot, write the prompt one-sidedly, flip it to PREFILL_PENDING.

        Raises :class:`NoFreeSlot` or :class:`ArenaExhausted` (record marked FAILED).
        """
        if not rec.prompt:
            raise ValueError("empty prompt")
        try:
            slot = yield from self.slots.find_free_slot(rec)
        except NoFreeSlot:
            self.tracker.fail_unsubmitted(rec, self.rt.now(), "no free slot")
            raise
        with self._seq_lock:
            seq = next(self._arrival_seq)
        try:
            writes = self.ring.prompt_writes(slot, rec.prompt, rec.max_output, rec.seed,
                                             rec.request_id, seq)
        except ArenaExhausted:
            self.slots.release(slot, rec)
            self.tracker.fail_unsubmitted(rec, self.rt.now(), "arena exhausted")
            raise
        rec.slot_index = slot
        rec.arrival_seq = seq
        rec.output_offset = self.ring._ranges[slot][2]
        tasks = [self.transport.write_task(self.regions[name], off, payload)
                 for name, off, payload in writes]
        yield from self.coalescer.submit(tasks)
        # payload is visible; publish the slot
        if not self.ring.transition(slot, SlotState.EMPTY, SlotState.PREFILL_PENDING, Plane.FRONTEND,
                                    owner=rec):
            raise RuntimeError(f"reserved slot {slot} changed under its owner")
        rec.status = Status.SUBMITTED
        rec.submit_time = self.rt.now()
        self.slots.submitted(slot)
        self.tracker.activate(rec, urgent=self.cfg.poll.urgent_enabled)
        return rec

    def disconnect(self, rec: RequestRecord) -> None:
        """Client went away: stop streaming; the slot is reclaimed once the device finishes."""
        self.tracker.abandon(rec, self.rt.now(), "client disconnected")

    def start(self) -> None:
        self.rt.spawn(self.reader.loop(), "token-reader")

    def stop(self) -> None:
        self.reader.stop_requested = True
