"""Persistent device-plane scheduler.

One control loop owns the decode batch.  Each iteration launches the decode
graph, scans the ring for new prompts while the graph runs, polls the
extraction buffer, publishes tokens, and -- when all three admission
conditions hold -- pauses the batch, prefills the newcomers and resumes.

``Mode.DEVICE`` models the GPU-resident placement: launches come from the
fire-and-forget window (120 outstanding per parent graph instance, recovered
with a tail launch) and nothing waits on the host.  ``Mode.HOST_MEDIATED``
runs the identical policy but pays a host round trip after every step.
"""

from __future__ import annotations

import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .engine import Engine, ExtractionBuffer, Phase, SeqInput, eos_check, prompt_hash
from .host import HostOverheadModel, HostWork
from .kv import KvExhausted, KvPagePool
from .ring_buffer import Plane, RingBuffer, SlotState
from .runtime import At, Runtime

logger = logging.getLogger(__name__)

S = SlotState


class Mode(enum.Enum):
    DEVICE = "device"
    HOST_MEDIATED = "host"


class LaunchMode(enum.Enum):
    FIRE_AND_FORGET = "ff"
    TAIL = "tail"
    HOST = "host"


class SchedulerError(Exception):
    pass


class WindowOverflow(SchedulerError):
    pass


class CompletionTimeout(SchedulerError):
    pass


F_FF = 2e-6
F_TAIL = 5.5e-6


@dataclass
class LaunchWindow:
    limit: int = 120
    counter: int = 0
    tail_launch_count: int = 0
    epoch: int = 0
    max_counter: int = 0


@dataclass(frozen=True)
class LaunchRecord:
    mode: LaunchMode
    cost: float
    epoch: int
    counter: int


def launch(window: LaunchWindow, mode: LaunchMode, host_cost: float = 0.0) -> LaunchRecord:
    """Account one graph launch against ``window`` and return its cost."""
    if mode is LaunchMode.FIRE_AND_FORGET:
        if window.counter >= window.limit:
            raise WindowOverflow(f"fire-and-forget at counter {window.counter} == limit {window.limit}")
        window.counter += 1
        window.max_counter = max(window.max_counter, window.counter)
        cost = F_FF
    elif mode is LaunchMode.TAIL:
        window.epoch += 1
        window.tail_launch_count += 1
        window.counter = 0
        cost = F_TAIL
    else:
        cost = host_cost
    return LaunchRecord(mode, cost, window.epoch, window.counter)


def next_launch_mode(window: LaunchWindow) -> LaunchMode:
    return LaunchMode.TAIL if window.counter >= window.limit else LaunchMode.FIRE_AND_FORGET


@dataclass
class BatchState:
    capacity: int = 16
    active: list[int] = field(default_factory=list)
    paused: list[int] = field(default_factory=list)
    step_index: int = 0


@dataclass(frozen=True)
class AdmitDecision:
    pending_found: bool
    capacity_free: bool
    window_headroom: bool

    @property
    def admit(self) -> bool:
        return self.pending_found and self.capacity_free and self.window_headroom

    @property
    def reasons(self) -> tuple[bool, bool, bool]:
        return (self.pending_found, self.capacity_free, self.window_headroom)


def admit_check(pending: Sequence[int] | int, batch: BatchState, window: Optional[LaunchWindow],
                completing_this_step: int, launches_needed: int = 2) -> AdmitDecision:
    """Evaluate the three admission conditions; ``window=None`` means no launch window applies."""
    n_pending = pending if isinstance(pending, int) else len(pending)
    capacity_free = len(batch.active) + len(batch.paused) - completing_this_step < batch.capacity
    headroom = True if window is None else window.counter + launches_needed <= window.limit
    return AdmitDecision(n_pending > 0, capacity_free, headroom)


@dataclass
class SchedulerConfig:
    mode: Mode = Mode.DEVICE
    batch_capacity: int = 16
    window_limit: int = 120
    lanes: int = 256
    scan_workers: int = 1
    scan_cost: float = 2e-6
    idle_poll: float = 50e-6
    poll_timeout: float = 5.0
    host: HostOverheadModel = field(default_factory=HostOverheadModel)
    host_seed: int = 0
    log_events: bool = True


@dataclass
class SeqCtx:
    request_id: int
    seed: int
    phash: int
    input_len: int
    max_output: int
    arrival_seq: int
    generated: int = 0


@dataclass
class RunStats:
    decode_steps: int = 0
    prefills: int = 0
    host_round_trips: int = 0
    host_prefill_round_trips: int = 0
    launches_ff: int = 0
    launches_tail: int = 0
    completed: int = 0
    tokens_published: int = 0
    prefill_order: list[tuple[float, int]] = field(default_factory=list)  # (clock, arrival_seq)
    completion_times: dict[int, float] = field(default_factory=dict)  # request_id -> clock
    admit_step: dict[int, int] = field(default_factory=dict)
    first_decode_step: dict[int, int] = field(default_factory=dict)
    host_overheads: list[float] = field(default_factory=list)
    max_window_counter: int = 0
    epochs: int = 0


class EventLog:
    """Append-only scheduler trace: (step, epoch, event, slot, clock, info)."""

    def __init__(self, enabled: bool = True) -> None:
        self.enabled = enabled
        self.records: list[tuple[int, int, str, int, float, Optional[dict]]] = []

    def add(self, step: int, epoch: int, event: str, slot: int, clock: float,
            info: Optional[dict] = None) -> None:
        if self.enabled:
            self.records.append((step, epoch, event, slot, clock, info))

    def of(self, event: str) -> list[tuple]:
        return [r for r in self.records if r[2] == event]

    def to_ndjson(self) -> str:
        lines = []
        for step, epoch, event, slot, clock, info in self.records:
            rec = {"step": step, "epoch": epoch, "event": event, "slot": slot, "clock": clock}
            if info:
                rec.update(info)
            lines.append(json.dumps(rec))
        return "\n".join(lines) + ("\n" if lines else "")


class DeviceScheduler:
    def __init__(self, ring: RingBuffer, engine: Engine, kv: KvPagePool, runtime: Runtime,
                 config: Optional[SchedulerConfig] = None) -> None:
        self.ring = ring
        self.engine = engine
        self.kv = kv
        self.rt = runtime
        self.cfg = config or SchedulerConfig()
        if ring.capacity % self.cfg.lanes and self.cfg.lanes <= ring.capacity:
            raise ValueError("lane count must divide ring capacity")
        self.window = LaunchWindow(limit=self.cfg.window_limit)
        self.batch = BatchState(capacity=self.cfg.batch_capacity)
        self.log = EventLog(self.cfg.log_events)
        self.stats = RunStats()
        self.ctx: dict[int, SeqCtx] = {}
        self.decode_buf = ExtractionBuffer()
        self.prefill_buf = ExtractionBuffer()
        self.t = 0.0  # device timeline
        self.stop_requested = False
        self._rng = np.random.default_rng(self.cfg.host_seed)
        self._host_work: Optional[HostWork] = None
        self._pool: Optional[ThreadPoolExecutor] = None
        if self.cfg.scan_workers > 1:
            self._pool = ThreadPoolExecutor(self.cfg.scan_workers, thread_name_prefix="scan")

    @property
    def mode(self) -> Mode:
        return self.cfg.mode

    # -- scanning --------------------------------------------------------------
    def lane_range(self, lane: int, lane_count: Optional[int] = None) -> tuple[int, int]:
        lanes = lane_count or self.cfg.lanes
        per = self.ring.capacity // lanes
        return lane * per, (lane + 1) * per

    def _scan_lane(self, lane: int, lanes: int, claim: bool) -> list[int]:
        lo, hi = self.lane_range(lane, lanes)
        idx = (lo + np.flatnonzero(self.ring._state[lo:hi] == S.PREFILL_PENDING)).tolist()
        if claim:
            idx = [i for i in idx if self.ring.transition(i, S.PREFILL_PENDING, S.PREFILL_PROCESSING,
                                                          Plane.DEVICE)]
        return idx

    def _fcfs(self, slots: Iterable[int]) -> list[int]:
        seq = self.ring.desc["arrival_seq"]
        return sorted(slots, key=lambda i: (int(seq[i]), i))

    def detect_pending(self, lane_count: Optional[int] = None) -> list[int]:
        """Overlapped-scan form: find PREFILL_PENDING slots without claiming, FCFS-ordered."""
        return self._fcfs(self._scan(lane_count, claim=False))

    def _scan(self, lane_count: Optional[int], claim: bool) -> list[int]:
        lanes = min(lane_count or self.cfg.lanes, self.ring.capacity)
        if self.ring.capacity % lanes:
            raise ValueError("lane count must divide ring capacity")
        if self._pool is not None:
            parts = self._pool.map(lambda k: self._scan_lane(k, lanes, claim), range(lanes))
            return [i for part in parts for i in part]
        # vectorised equivalent of every lane scanning its range in turn
        idx = self.ring.pending_slots().tolist()
        if claim:
            idx = [i for i in idx if self.ring.transition(i, S.PREFILL_PENDING, S.PREFILL_PROCESSING,
                                                          Plane.DEVICE)]
        return idx

    def scan_slots(self, lane_count: Optional[int] = None) -> list[int]:
        """Scan all lanes and claim every pending slot; returns claims in FCFS order."""
        return self._fcfs(self._scan(lane_count, claim=True))

    # -- helpers ---------------------------------------------------------------
    def _emit(self, event: str, slot: int = -1, info: Optional[dict] = None) -> None:
        self.log.add(self.batch.step_index, self.window.epoch, event, slot, self.t, info)

    def _sync_wall(self) -> None:
        if self.rt.mode == "wall":
            self.t = max(self.t, self.rt.now())

    def _launch(self) -> None:
        """Pay for one graph launch from whichever side owns launching."""
        if self.mode is Mode.DEVICE:
            rec = launch(self.window, next_launch_mode(self.window))
            if rec.mode is LaunchMode.TAIL:
                self.stats.launches_tail += 1
                self._emit("launch_tail")
            else:
                self.stats.launches_ff += 1
                self._emit("launch_ff", info={"counter": rec.counter})
            self.stats.max_window_counter = self.window.max_counter
            self.stats.epochs = self.window.epoch
        else:
            rec = launch(self.window, LaunchMode.HOST, self.cfg.host.sample_launch(self._rng))
            self._emit("launch_host")
        self.t += rec.cost

    def _host_round_trip(self, prefill: bool = False):
        """Generator: copy tokens to the host, reassemble the batch there, come back."""
        h = self.cfg.host.sample_reassembly(self._rng)
        self.stats.host_overheads.append(h)
        if prefill:
            self.stats.host_prefill_round_trips += 1
        else:
            self.stats.host_round_trips += 1
        if self.rt.mode == "wall":
            yield At(self.t + self.cfg.host.pcie)
            if self._host_work is None:
                self._host_work = HostWork.shared()
            t0 = self.rt.now()
            self._host_work.run(h)
            self.stats.host_overheads[-1] = self.rt.now() - t0
            self.t = self.rt.now()
        else:
            self.t += self.cfg.host.pcie + h

    def poll_completion(self, buf: ExtractionBuffer):
        """Generator returning the sampled tokens once ``buf`` is occupied."""
        start = self.rt.now()
        while True:
            now = self.rt.now()
            if buf.occupied(max(now, self.t) if self.rt.mode == "virtual" else now):
                self.t = max(self.t, buf.ready_at)
                return buf.tokens
            if buf.tokens is not None:
                yield At(buf.ready_at)
                continue
            if now - start > self.cfg.poll_timeout:
                raise CompletionTimeout(f"no deposit after {self.cfg.poll_timeout}s")
            yield self.cfg.idle_poll

    def _predict_completing(self) -> set[int]:
        model = self.engine.model
        out = set()
        for i in self.batch.active:
            c = self.ctx[i]
            tok = model.token(c.seed, c.phash, c.generated)
            if eos_check(c.generated, c.max_output, tok, model.eos_token):
                out.add(i)
        return out

    def _retire(self, slot: int) -> None:
        c = self.ctx.pop(slot)
        self.ring.transition(slot, S.DECODE_PROCESSING, S.DECODE_COMPLETED, Plane.DEVICE)
        self.kv.free(c.request_id)
        self.stats.completed += 1
        self.stats.completion_times[c.request_id] = self.t
        self._emit("complete", slot, {"request_id": c.request_id})

    # -- admission / prefill ---------------------------------------------------
    def _claim(self, candidates: Sequence[int], limit: int) -> list[int]:
        ring = self.ring
        desc = ring.desc
        claimed = []
        for i in candidates:
            if len(claimed) >= limit:
                break
            rid = int(ring.meta["request_id"][i])
            need = int(desc["input_len"][i]) + int(desc["max_output"][i])
            try:
                self.kv.alloc(rid, need)
            except KvExhausted:
                self._emit("kv_deferred", i)
                break  # stays PREFILL_PENDING; FCFS forbids skipping ahead
            if not ring.transition(i, S.PREFILL_PENDING, S.PREFILL_PROCESSING, Plane.DEVICE):
                self.kv.free(rid)
                continue
            claimed.append(i)
        return claimed

    def pause_prefill_resume(self, candidates: Sequence[int], decided_at: Optional[int] = None):
        """Generator: pause the batch, prefill admitted candidates, merge and resume."""
        ring, batch = self.ring, self.batch
        self._emit("pause", info={"active": list(batch.active)})
        for i in batch.active:
            ring.transition(i, S.DECODE_PROCESSING, S.DECODE_PAUSED, Plane.DEVICE)
        batch.paused, batch.active = batch.active, []
        admitted = self._claim(candidates, batch.capacity - len(batch.paused))
        assert len(batch.paused) + len(admitted) <= batch.capacity
        joined = []
        if admitted:
            desc = ring.desc
            inputs = []
            for i in admitted:
                prompt = ring.prompt(i)
                c = SeqCtx(int(ring.meta["request_id"][i]), int(desc["sampling_seed"][i]),
                           prompt_hash(prompt.tolist()), len(prompt), int(desc["max_output"][i]),
                           int(desc["arrival_seq"][i]))
                self.ctx[i] = c
                self.stats.prefill_order.append((self.t, c.arrival_seq))
                self.stats.admit_step[c.request_id] = (
                    batch.step_index - 1 if decided_at is None else decided_at)
                self._emit("prefill_start", i, {"arrival_seq": c.arrival_seq})
                inputs.append(SeqInput(c.seed, c.phash, 0, c.input_len))
            graph = self.engine.cache.lookup(len(admitted), max(s.length for s in inputs), Phase.PREFILL)
            self._launch()
            self.engine.execute(graph, inputs, self.prefill_buf, self.t)
            tokens = yield from self.poll_completion(self.prefill_buf)
            self.stats.prefills += 1
            eos = self.engine.model.eos_token
            for i, tok in zip(admitted, tokens):
                c = self.ctx[i]
                ring.publish_tokens(i, [tok])
                c.generated = 1
                self.stats.tokens_published += 1
                ring.transition(i, S.PREFILL_PROCESSING, S.DECODE_PROCESSING, Plane.DEVICE)
                if eos_check(0, c.max_output, tok, eos):
                    self._retire(i)
                else:
                    joined.append(i)
            if self.mode is Mode.HOST_MEDIATED:
                yield from self._host_round_trip(prefill=True)
        for i in batch.paused:
            ring.transition(i, S.DECODE_PAUSED, S.DECODE_PROCESSING, Plane.DEVICE)
        batch.active = batch.paused + joined
        batch.paused = []
        self._emit("resume", info={"admitted": admitted})
        return admitted

    # -- the loop --------------------------------------------------------------
    def _decode_step(self):
        ring, batch, model = self.ring, self.batch, self.engine.model
        step = batch.step_index
        inputs = []
        for i in batch.active:
            c = self.ctx[i]
            inputs.append(SeqInput(c.seed, c.phash, c.generated, c.input_len + c.generated))
            self.stats.first_decode_step.setdefault(c.request_id, step)
        graph = self.engine.cache.lookup(len(inputs), max(s.length for s in inputs), Phase.DECODE)
        self._launch()
        self.engine.execute(graph, inputs, self.decode_buf, self.t)
        # overlapped scan while the graph runs
        candidates = self.detect_pending()
        completing = self._predict_completing()
        window = self.window if self.mode is Mode.DEVICE else None
        decision = admit_check(candidates, batch, window, len(completing))
        self._emit("admit_check", info={"reasons": decision.reasons, "pending": len(candidates)})
        tokens = yield from self.poll_completion(self.decode_buf)
        for i, tok in zip(list(batch.active), tokens):
            c = self.ctx[i]
            ring.publish_tokens(i, [tok])
            self.stats.tokens_published += 1
            done = eos_check(c.generated, c.max_output, tok, model.eos_token)
            c.generated += 1
            if done:
                batch.active.remove(i)
                self._retire(i)
        self.stats.decode_steps += 1
        if self.mode is Mode.HOST_MEDIATED:
            yield from self._host_round_trip()
        batch.step_index += 1
        if decision.admit:
            yield from self.pause_prefill_resume(candidates, decided_at=step)

    def _idle_step(self):
        self.t += self.cfg.scan_cost
        candidates = self.detect_pending()
        if not candidates:
            self.t += self.cfg.idle_poll
            yield At(self.t)
            self._sync_wall()
            return
        window = self.window if self.mode is Mode.DEVICE else None
        decision = admit_check(candidates, self.batch, window, 0)
        self._emit("admit_check", info={"reasons": decision.reasons, "pending": len(candidates)})
        if not decision.window_headroom:
            # nothing in flight to carry the window over: recycle the instance now
            launch(self.window, LaunchMode.TAIL)
            self.t += F_TAIL
            self.stats.launches_tail += 1
            self.stats.epochs = self.window.epoch
            self._emit("launch_tail", info={"idle": True})
            return
        yield from self.pause_prefill_resume(candidates)

    def run_loop(self, mode: Optional[Mode] = None, max_steps: Optional[int] = None):
        """Generator form of the persistent loop; returns :class:`RunStats` when stopped."""
        if mode is not None:
            self.cfg.mode = mode
        self.t = self.rt.now()
        while self.rt.active and not self.stop_requested:
            if max_steps is not None and self.stats.decode_steps >= max_steps:
                break
            if self.batch.active:
                yield from self._decode_step()
            else:
                yield from self._idle_step()
            yield At(self.t)
            if self.mode is Mode.HOST_MEDIATED:
                self._sync_wall()
        return self.stats

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=False)
