"""Background token reader: bulk metadata poll, urgent-first diffing, range reads."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..ring_buffer import META_DTYPE, TOKEN_BYTES, Plane, RingBuffer, SlotState
from ..runtime import Runtime
from ..transport import QueuePair, RegionHandle, Transport, TransportError
from .slots import SlotTracker
from .tracker import RequestTracker, Status

logger = logging.getLogger(__name__)


@dataclass
class PollConfig:
    init_us: float = 200.0
    min_us: float = 50.0
    max_us: float = 2000.0
    max_slots_per_cycle: int = 1024
    urgent_enabled: bool = True


class AdaptivePoller:
    """Halve the interval after a productive cycle, double it after an idle one."""

    def __init__(self, cfg: PollConfig) -> None:
        self.cfg = cfg
        self.interval_us = cfg.init_us

    def update(self, delivered: int) -> float:
        if delivered:
            self.interval_us = max(self.cfg.min_us, self.interval_us / 2)
        else:
            self.interval_us = min(self.cfg.max_us, self.interval_us * 2)
        return self.interval_us


class TokenReader:
    def __init__(self, ring: RingBuffer, transport: Transport, qp: QueuePair,
                 regions: dict[str, RegionHandle], tracker: RequestTracker, slots: SlotTracker,
                 runtime: Runtime, cfg: PollConfig | None = None) -> None:
        self.ring = ring
        self.transport = transport
        self.qp = qp
        self.regions = regions
        self.tracker = tracker
        self.slots = slots
        self.rt = runtime
        self.cfg = cfg or PollConfig()
        self.poller = AdaptivePoller(self.cfg)
        self._meta = np.empty(ring.capacity * META_DTYPE.itemsize, dtype=np.uint8)
        self._rotate = 0
        self.cycles = 0
        self.delivered_total = 0
        self.stop_requested = False

    def _order(self) -> list[int]:
        urgent, rest = self.tracker.active_slots()
        if not self.cfg.urgent_enabled:
            rest, urgent = sorted(urgent + rest), []
        if rest:
            k = self._rotate % len(rest)
            rest = rest[k:] + rest[:k]
        order = urgent + rest
        cap = self.cfg.max_slots_per_cycle
        if len(order) > cap:
            self._rotate += cap - len(urgent) if cap > len(urgent) else 0
            order = order[:cap]
        return order

    def cycle(self):
        """Generator: one reader cycle; returns the number of tokens delivered."""
        tr = self.transport
        meta_task = tr.read_task(self.regions["meta"], 0, self._meta.nbytes, self._meta)
        tr.post(self.qp, [meta_task])
        yield from tr.wait(self.qp, [meta_task])
        snap = self._meta.view(META_DTYPE)
        self.slots.apply_snapshot(snap)
        states, gens, rids = snap["state"], snap["generated"], snap["request_id"]

        reads = []
        finished = []
        by_slot = self.tracker.by_slot
        for slot in self._order():
            rec = by_slot.get(slot)
            if rec is None or int(rids[slot]) != rec.request_id:
                continue
            if rec.status is Status.FAILED:
                if states[slot] == SlotState.DECODE_COMPLETED:
                    finished.append((rec, int(gens[slot])))
                continue
            gen = int(gens[slot])
            if gen > rec.last_seen_generated:
                start = rec.output_offset + rec.last_seen_generated
                task = tr.read_task(self.regions["output"], start * TOKEN_BYTES,
                                    (gen - rec.last_seen_generated) * TOKEN_BYTES)
                reads.append((rec, gen, task))
            if states[slot] == SlotState.DECODE_COMPLETED:
                finished.append((rec, gen))
        delivered = 0
        if reads:
            tasks = [t for _, _, t in reads]
            accepted = tr.post(self.qp, tasks)
            if accepted < len(tasks):
                # pool pressure: deliver what fit, the rest waits for the next cycle
                reads = reads[:accepted]
                tasks = tasks[:accepted]
            yield from tr.wait(self.qp, tasks)
            now = self.rt.now()
            for rec, gen, task in reads:
                ids = task.dest.view("<u4").tolist()
                self.tracker.deliver(rec, ids, now)
                delivered += len(ids)
        now = self.rt.now()
        for rec, gen in finished:
            if rec.status is Status.FAILED or rec.tokens_streamed == gen:
                self._reclaim(rec, now)
        self.cycles += 1
        self.delivered_total += delivered
        return delivered

    def _reclaim(self, rec, now: float) -> None:
        slot = rec.slot_index
        if not self.ring.transition(slot, SlotState.DECODE_COMPLETED, SlotState.EMPTY, Plane.FRONTEND):
            logger.warning("reclaim of slot %d lost a race", slot)
            return
        self.slots.reclaimed(slot)
        if rec.status is Status.FAILED:
            self.tracker.drop(rec)
        else:
            self.tracker.finish(rec, now)

    def loop(self):
        while self.rt.active and not self.stop_requested:
            try:
                n = yield from self.cycle()
            except TransportError as exc:
                logger.error("token reader transport failure: %s", exc)
                for rec in list(self.tracker.by_slot.values()):
                    self.tracker.abandon(rec, self.rt.now(), str(exc))
                n = 0
            yield self.poller.update(n) * 1e-6
