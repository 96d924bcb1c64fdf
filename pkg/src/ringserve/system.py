"""Wires ring, transport, engine, scheduler and frontend into one runnable system."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

from .config import Config
from .engine import Engine, GraphCache, PseudoModel, latency_preset
from .frontend import Frontend, FrontendConfig, PollConfig
from .host import HostOverheadModel
from .kv import KvPagePool
from .ring_buffer import RingBuffer
from .runtime import Runtime, make_runtime
from .scheduler import DeviceScheduler, Mode, SchedulerConfig
from .tokenizer import Tokenizer
from .transport import Transport

logger = logging.getLogger(__name__)

MODES = {"device": Mode.DEVICE, "host": Mode.HOST_MEDIATED}


def parse_mode(name: str | Mode) -> Mode:
    if isinstance(name, Mode):
        return name
    try:
        return MODES[name]
    except KeyError:
        raise ValueError(f"mode must be one of {sorted(MODES)}, got {name!r}") from None


_LETTERS = b"etaoinshrdlucmfwypvbgkjqxz"


def synthetic_merges(count: int) -> list[tuple[bytes, bytes]]:
    """Deterministic letter-bigram merges, for running without tokenizer files."""
    pairs = [(bytes([a]), bytes([b])) for a in _LETTERS for b in _LETTERS]
    pairs += [(b" ", bytes([a])) for a in _LETTERS]
    if count > len(pairs):
        raise ValueError(f"synthetic vocabulary supports at most {256 + len(pairs)} ids")
    return pairs[:count]


def build_tokenizer(cfg: Config) -> Tokenizer:
    """The model's EOS id, when outside the vocabulary, becomes a special id that decodes to nothing."""
    tc = cfg.tokenizer
    if tc.vocab and tc.merges:
        base = Tokenizer.load(tc.vocab, tc.merges)
    else:
        base = Tokenizer.byte_level(synthetic_merges(max(0, cfg.engine.vocab_size - 256)))
    eos = cfg.engine.eos_token if cfg.engine.eos_token is not None else base.vocab_size
    return base if eos < base.vocab_size else base.with_special({eos: b""})


@dataclass
class System:
    cfg: Config
    runtime: Runtime
    transport: Transport
    ring: RingBuffer
    kv: KvPagePool
    engine: Engine
    scheduler: DeviceScheduler
    frontend: Frontend
    tokenizer: Tokenizer

    def start(self) -> None:
        self.runtime.spawn(self.scheduler.run_loop(), "device-scheduler")
        self.frontend.start()

    def stop(self) -> None:
        self.scheduler.stop_requested = True
        self.frontend.stop()
        self.runtime.shutdown()
        if hasattr(self.runtime, "join"):
            self.runtime.join()
        self.scheduler.close()


def build_system(cfg: Optional[Config] = None, mode: Optional[str | Mode] = None,
                 runtime: Optional[Runtime] = None, host_multiplier: Optional[float] = None,
                 tokenizer: Optional[Tokenizer] = None) -> System:
    cfg = cfg or Config()
    rt = runtime or make_runtime(cfg.transport.mode)
    tc = cfg.transport
    transport = Transport(rt, c_fixed_us=tc.c_fixed_us, c_byte_ns=tc.c_byte_ns, cq_depth=tc.cq_depth,
                          task_pool=tc.task_pool)
    rc = cfg.ring
    ring = RingBuffer(rc.capacity, rc.input_arena_tokens, rc.output_arena_tokens)
    kv = KvPagePool(cfg.kv.page_size, cfg.kv.total_pages)

    tok = tokenizer or build_tokenizer(cfg)
    ec = cfg.engine
    eos = ec.eos_token if ec.eos_token is not None else tok.vocab_size - 1
    model = PseudoModel(vocab_size=tok.vocab_size, eos_token=eos, eos_prob=ec.eos_prob)
    profile = latency_preset(ec.latency_preset, **ec.latency)
    engine = Engine(GraphCache(ec.batch_grid, ec.seq_grid, profile), model)

    sc = cfg.scheduler
    om = cfg.host.overhead_model
    host = HostOverheadModel(om.low_ms, om.high_ms,
                             om.multiplier if host_multiplier is None else host_multiplier, om.pcie_us)
    scfg = SchedulerConfig(mode=parse_mode(mode if mode is not None else sc.mode),
                           batch_capacity=sc.batch_capacity, window_limit=sc.window_limit,
                           lanes=sc.lanes, scan_workers=sc.scan_workers, poll_timeout=sc.poll_timeout,
                           host=host, host_seed=om.seed, log_events=sc.log_events)
    scheduler = DeviceScheduler(ring, engine, kv, rt, scfg)

    fc = cfg.frontend
    poll = PollConfig(fc.poll_us_init, fc.poll_us_min, fc.poll_us_max, fc.max_slots_per_cycle,
                      fc.urgent_enabled)
    frontend = Frontend(ring, transport, rt, FrontendConfig(poll, fc.coalesce_us))
    return System(cfg, rt, transport, ring, kv, engine, scheduler, frontend, tok)
