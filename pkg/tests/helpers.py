"""Shared fixtures: small virtual systems, client drivers and a transition auditor."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from ringserve.config import Config
from ringserve.engine import Engine, GraphCache, PseudoModel, latency_preset
from ringserve.frontend import NoFreeSlot, RequestRecord, Status
from ringserve.host import HostOverheadModel
from ringserve.kv import KvPagePool
from ringserve.ring_buffer import LEGAL_TRANSITIONS, ArenaExhausted, Plane, RingBuffer, SlotState
from ringserve.runtime import VirtualRuntime
from ringserve.scheduler import DeviceScheduler, Mode, SchedulerConfig
from ringserve.system import System, build_system


def small_config(capacity: int = 64, **engine) -> Config:
    cfg = Config()
    cfg.ring.capacity = capacity
    cfg.ring.input_arena_tokens = 1 << 18
    cfg.ring.output_arena_tokens = 1 << 16
    cfg.scheduler.lanes = min(cfg.scheduler.lanes, capacity)
    cfg.scheduler.log_events = True
    cfg.engine.batch_grid = [1, 2, 4, 8, 16]
    cfg.engine.seq_grid = [64, 256, 1024, 2048]
    cfg.kv.total_pages = 8192
    for k, v in engine.items():
        setattr(cfg.engine, k, v)
    return cfg


def virtual_system(cfg: Optional[Config] = None, mode: str = "device", jitter: float = 0.0,
                   seed: Optional[int] = None, tokenizer=None) -> System:
    rt = VirtualRuntime(jitter=jitter, seed=seed)
    return build_system(cfg or small_config(), mode, runtime=rt, tokenizer=tokenizer)


@dataclass
class Job:
    time: float
    prompt: list[int]
    max_output: int
    seed: int


def random_jobs(rng: random.Random, n: int, max_prompt: int = 64, max_output: int = 16,
                spread: float = 0.05, vocab: int = 256) -> list[Job]:
    return [Job(rng.uniform(0, spread), [rng.randrange(vocab) for _ in range(rng.randint(1, max_prompt))],
                rng.randint(1, max_output), rng.randrange(1 << 40)) for _ in range(n)]


def client(system: System, job: Job, out: list, retry: float = 1e-3):
    yield job.time
    fe = system.frontend
    rec = fe.new_request(job.prompt, job.max_output, job.seed)
    out.append(rec)
    while True:
        try:
            yield from fe.submit(rec)
            return
        except (NoFreeSlot, ArenaExhausted):
            rec.status, rec.error = Status.QUEUED, None
            yield retry


def run_jobs(system: System, jobs: Sequence[Job], until: float = 600.0) -> list[RequestRecord]:
    """Submit every job through the frontend and run until all are streamed."""
    out: list[RequestRecord] = []
    for job in jobs:
        system.runtime.spawn(client(system, job, out), "client")
    system.start()
    tracker = system.frontend.tracker
    system.runtime.run(until=until, stop=lambda: tracker.done_count >= len(jobs))
    system.stop()
    return out


@dataclass
class TransitionAudit:
    """Checks every successful transition continues the slot's walk along legal edges."""

    capacity: int
    current: list = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    count: int = 0

    def __post_init__(self) -> None:
        self.current = [SlotState.EMPTY] * self.capacity

    def __call__(self, slot, expected, nxt, actor) -> None:
        self.count += 1
        if (expected, nxt) not in LEGAL_TRANSITIONS or LEGAL_TRANSITIONS[(expected, nxt)] is not actor:
            self.errors.append(f"illegal {expected.name}->{nxt.name} by {actor.value} on slot {slot}")
        if self.current[slot] is not expected:
            # two successes from the same state: a double claim
            self.errors.append(f"slot {slot}: {expected.name}->{nxt.name} while in {self.current[slot].name}")
        self.current[slot] = nxt


MODEL = PseudoModel(vocab_size=512, eos_token=511)


class Bench:
    """A scheduler wired to a ring with requests written straight into slots."""

    def __init__(self, mode=Mode.DEVICE, capacity=64, preset="llama8b", model=MODEL, host=None,
                 kv_pages=8192, window_limit=120, batch_capacity=16, drop=False, seed=None):
        self.rt = VirtualRuntime(jitter=1e-4 if seed is not None else 0.0, seed=seed)
        self.ring = RingBuffer(capacity, 1 << 18, 1 << 16)
        cache = GraphCache([1, 2, 4, 8, 16], [64, 256, 1024, 2048], latency_preset(preset))
        self.engine = Engine(cache, model, drop_deposits=drop)
        self.kv = KvPagePool(16, kv_pages)
        cfg = SchedulerConfig(mode=mode, batch_capacity=batch_capacity, window_limit=window_limit,
                              lanes=min(256, capacity), host=host or HostOverheadModel(), poll_timeout=1.0)
        self.sched = DeviceScheduler(self.ring, self.engine, self.kv, self.rt, cfg)
        self.jobs = {}  # slot -> (prompt, max_output, seed)
        self.seq = 0

    def put(self, slot, prompt, max_output, seed, arrival_seq=None):
        seq = self.seq if arrival_seq is None else arrival_seq
        self.seq += 1
        self.ring.write_prompt(slot, prompt, max_output, seed, request_id=slot + 1, arrival_seq=seq)
        assert self.ring.transition(slot, SlotState.EMPTY, SlotState.PREFILL_PENDING, Plane.FRONTEND)
        self.jobs[slot] = (list(prompt), max_output, seed)

    def put_later(self, t, *args):
        def proc():
            yield t
            self.put(*args)
        self.rt.spawn(proc(), "put")

    def run(self, n_jobs=None, until=600.0):
        n = n_jobs if n_jobs is not None else len(self.jobs)
        self.rt.spawn(self.sched.run_loop(), "sched")
        self.rt.run(until=until, stop=lambda: self.sched.stats.completed >= n)
        return self.sched.stats

    def outputs(self):
        return {s: self.ring.published(s).tolist() for s in self.jobs}

    def references(self):
        model = self.engine.model
        return {s: model.sequence(seed, p, m) for s, (p, m, seed) in self.jobs.items()}


def random_bench(rng, mode, n=24, **kw):
    b = Bench(mode, **kw)
    slots = rng.sample(range(b.ring.capacity), n)
    for s in slots:
        prompt = [rng.randrange(256) for _ in range(rng.randint(1, 300))]
        b.put_later(rng.uniform(0, 0.2), s, prompt, rng.randint(1, 40), rng.randrange(1 << 32))
    return b


def random_merges(rng: random.Random, count: int) -> list[tuple[bytes, bytes]]:
    """Merges over a small alphabet, each built from tokens that already exist."""
    tokens = [bytes([c]) for c in b"abcde fgh"]
    merges, seen = [], set()
    while len(merges) < count:
        left, right = rng.choice(tokens), rng.choice(tokens)
        if (left, right) in seen or len(left + right) > 6:
            continue
        seen.add((left, right))
        merges.append((left, right))
        if left + right not in tokens:
            tokens.append(left + right)
    return merges
