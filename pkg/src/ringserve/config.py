"""YAML-backed configuration. Every section is a dataclass; unknown keys are errors."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class TransportSection:
    mode: str = "virtual"  # virtual | wall
    c_fixed_us: float = 2.0
    c_byte_ns: float = 5.0
    cq_depth: int = 4096
    task_pool: int = 8192


@dataclass
class RingSection:
    capacity: int = 4096
    input_arena_tokens: int = 1 << 22
    output_arena_tokens: int = 1 << 21


@dataclass
class SchedulerSection:
    mode: str = "device"  # device | host
    batch_capacity: int = 16
    window_limit: int = 120
    lanes: int = 256
    scan_workers: int = 1
    poll_timeout: float = 5.0
    log_events: bool = False


@dataclass
class KvSection:
    page_size: int = 16
    total_pages: int = 65536


@dataclass
class OverheadSection:
    low_ms: float = 1.6
    high_ms: float = 7.0
    multiplier: float = 1.0
    pcie_us: float = 10.0
    seed: int = 0


@dataclass
class HostSection:
    overhead_model: OverheadSection = field(default_factory=OverheadSection)


@dataclass
class EngineSection:
    batch_grid: list[int] = field(default_factory=lambda: [1, 2, 4, 8, 16, 32, 64])
    seq_grid: list[int] = field(default_factory=lambda: [128, 256, 512, 1024, 2048, 4096])
    latency_preset: str = "llama8b"
    latency: dict[str, float] = field(default_factory=dict)  # overrides, or the profile for "custom"
    vocab_size: int = 512
    eos_token: Optional[int] = None  # default: a special id one past the tokenizer vocabulary
    eos_prob: float = 0.0


@dataclass
class FrontendSection:
    poll_us_init: float = 200.0
    poll_us_min: float = 50.0
    poll_us_max: float = 2000.0
    max_slots_per_cycle: int = 1024
    coalesce_us: float = 100.0
    urgent_enabled: bool = True


@dataclass
class TokenizerSection:
    vocab: Optional[str] = None
    merges: Optional[str] = None


@dataclass
class BenchSection:
    arrival: str = "poisson"  # poisson | fixed
    duration: float = 20.0
    requests_per_rate: Optional[int] = None
    warmup_seconds: float = 2.0
    load_scale: float = 1.0
    rates: list[float] = field(default_factory=list)
    prompt: str = "fixed:256"  # fixed:N | uniform:A:B | sharegpt | trace:PATH
    output: str = "fixed:64"
    seed: int = 0
    interference_threads: int = 0
    interference_multiplier: float = 3.0  # virtual clock: host overhead scale under load


@dataclass
class Config:
    transport: TransportSection = field(default_factory=TransportSection)
    ring: RingSection = field(default_factory=RingSection)
    scheduler: SchedulerSection = field(default_factory=SchedulerSection)
    kv: KvSection = field(default_factory=KvSection)
    host: HostSection = field(default_factory=HostSection)
    engine: EngineSection = field(default_factory=EngineSection)
    frontend: FrontendSection = field(default_factory=FrontendSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    bench: BenchSection = field(default_factory=BenchSection)


def _build(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {where + '.' if where else ''}{key}")
        default = fields[key].default_factory() if fields[key].default_factory is not dataclasses.MISSING \
            else None
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{where}.{key}" if where else key)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(data: Optional[dict]) -> Config:
    return _build(Config, data or {}, "")


def load_config(path: Optional[str | Path]) -> Config:
    if path is None:
        return Config()
    with open(path, encoding="utf-8") as fh:
        return from_dict(yaml.safe_load(fh))
