"""Arrival schedules and request-length distributions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

# synthetic stand-in for a chat trace: mean input/output lengths
SHAREGPT_MEANS = (1019, 463)
_LOGNORMAL_SIGMA = 0.9


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class LengthDist:
    kind: str  # fixed | uniform | lognormal | trace
    a: float = 0.0
    b: float = 0.0
    cap: int = 4096
    values: tuple[int, ...] = ()

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(n, int(self.a), dtype=np.int64)
        if self.kind == "uniform":
            return rng.integers(int(self.a), int(self.b) + 1, size=n)
        if self.kind == "lognormal":
            mu = math.log(self.a) - _LOGNORMAL_SIGMA ** 2 / 2
            x = rng.lognormal(mu, _LOGNORMAL_SIGMA, size=n)
            return np.clip(np.rint(x), 1, self.cap).astype(np.int64)
        if self.kind == "trace":
            reps = -(-n // len(self.values))
            return np.tile(np.asarray(self.values, dtype=np.int64), reps)[:n]
        raise WorkloadError(f"unknown length distribution {self.kind!r}")


def read_trace(path: str | Path) -> list[tuple[int, int]]:
    """CSV of ``input_len,output_len`` rows; a non-numeric first row is a header."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for n, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                a, b = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                if n == 0:
                    continue
                raise WorkloadError(f"{path}:{n + 1}: expected input_len,output_len") from None
            if a < 1 or b < 1:
                raise WorkloadError(f"{path}:{n + 1}: lengths must be >= 1")
            rows.append((a, b))
    if not rows:
        raise WorkloadError(f"{path}: empty trace")
    return rows


def parse_lengths(text: str, which: int = 0) -> LengthDist:
    """``fixed:N``, ``uniform:A:B``, ``sharegpt`` or ``trace:PATH`` (column ``which``)."""
    kind, _, rest = text.partition(":")
    if kind == "fixed":
        return LengthDist("fixed", int(rest))
    if kind == "uniform":
        a, b = (int(x) for x in rest.split(":"))
        return LengthDist("uniform", a, b)
    if kind == "sharegpt":
        return LengthDist("lognormal", SHAREGPT_MEANS[which], cap=4096 if which == 0 else 2048)
    if kind == "trace":
        return LengthDist("trace", values=tuple(r[which] for r in read_trace(rest)))
    raise WorkloadError(f"cannot parse length distribution {text!r}")


@dataclass
class WorkloadSpec:
    rate: float
    arrival: str = "poisson"  # poisson | fixed
    duration: Optional[float] = None
    count: Optional[int] = None
    prompt: LengthDist = field(default_factory=lambda: LengthDist("fixed", 256))
    output: LengthDist = field(default_factory=lambda: LengthDist("fixed", 64))
    vocab: int = 256  # prompt token ids are drawn below this

    def validate(self) -> None:
        if not self.rate > 0:
            raise WorkloadError("rate must be positive")
        if self.arrival not in ("poisson", "fixed"):
            raise WorkloadError(f"unknown arrival process {self.arrival!r}")
        if (self.duration is None) == (self.count is None):
            raise WorkloadError("give exactly one of duration or count")
        for d in (self.prompt, self.output):
            if d.kind in ("fixed", "uniform") and min(d.a, d.b if d.kind == "uniform" else d.a) < 1:
                raise WorkloadError("lengths must be >= 1")


@dataclass(frozen=True)
class Arrival:
    time: float
    prompt: list[int]
    max_output: int
    seed: int


def arrival_times(spec: WorkloadSpec, rng: np.random.Generator) -> np.ndarray:
    gap = 1.0 / spec.rate
    if spec.arrival == "fixed":
        n = spec.count if spec.count is not None else int(math.floor(spec.duration * spec.rate + 1e-9))
        return gap * np.arange(1, n + 1)
    if spec.count is not None:
        return np.cumsum(rng.exponential(gap, size=spec.count))
    times = []
    t = 0.0
    while True:
        t += rng.exponential(gap)
        if t > spec.duration:
            break
        times.append(t)
    return np.asarray(times)


def generate(spec: WorkloadSpec, seed: int) -> list[Arrival]:
    """Deterministic for a given seed."""
    spec.validate()
    rng = np.random.default_rng(seed)
    times = arrival_times(spec, rng)
    n = len(times)
    plens = spec.prompt.sample(rng, n)
    olens = spec.output.sample(rng, n)
    seeds = rng.integers(0, 1 << 62, size=n)
    out = []
    for t, pl, ol, s in zip(times, plens, olens, seeds):
        prompt = rng.integers(0, spec.vocab, size=int(pl)).tolist()
        out.append(Arrival(float(t), prompt, int(ol), int(s)))
    return out


def default_rates(load_scale: float = 1.0, levels: int = 13, top: float = 32.0) -> list[float]:
    """``levels`` offered loads from 1 to ``top`` req/s (geometric), times ``load_scale``."""
    return [round(float(r) * load_scale, 6) for r in np.geomspace(1.0, top, levels)]


def summary_lengths(arrivals: Sequence[Arrival]) -> tuple[float, float]:
    if not arrivals:
        return 0.0, 0.0
    return (float(np.mean([len(a.prompt) for a in arrivals])),
            float(np.mean([a.max_output for a in arrivals])))
