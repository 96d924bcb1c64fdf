"""Emulated inference engine: graph cache, latency profiles and a pseudo-model.

The pseudo-model replaces real weights with a 64-bit mixing chain so the
token at output position ``p`` depends only on (sampling seed, prompt hash,
p).  That keeps every schedule -- device-resident or host-mediated, one epoch
or many -- producing bit-identical streams.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

GRAPH_MEMORY_COST = int(2.5 * 1024 * 1024)


class Phase(enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"


class EngineError(Exception):
    pass


class EmptyGrid(EngineError, ValueError):
    pass


class ShapeViolation(EngineError):
    pass


# ---------------------------------------------------------------------------
# pseudo-model


def mix64(x: int) -> int:
    """splitmix64 finaliser."""
    x = (x + GOLDEN) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def prompt_hash(tokens: Sequence[int]) -> int:
    h = FNV_OFFSET
    for t in tokens:
        h = ((h ^ (int(t) & 0xFFFFFFFF)) * FNV_PRIME) & MASK64
    return h


@dataclass(frozen=True)
class PseudoModel:
    vocab_size: int = 512
    eos_token: int = 0
    eos_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.vocab_size < 2 or not 0 <= self.eos_token < self.vocab_size:
            raise ValueError("eos_token must lie inside a vocabulary of at least two ids")

    def mix(self, seed: int, phash: int, position: int) -> int:
        return mix64((seed & MASK64) ^ mix64((phash + position * GOLDEN) & MASK64))

    def token(self, seed: int, phash: int, position: int) -> int:
        z = self.mix(seed, phash, position)
        if self.eos_prob > 0.0 and (z >> 11) * (1.0 / (1 << 53)) < self.eos_prob:
            return self.eos_token
        t = z % (self.vocab_size - 1)
        return t + 1 if t >= self.eos_token else t

    def sequence(self, seed: int, prompt: Sequence[int], max_output: int) -> list[int]:
        """Reference output of one request when run in isolation."""
        ph = prompt_hash(prompt)
        out = []
        for p in range(max_output):
            tok = self.token(seed, ph, p)
            out.append(tok)
            if eos_check(p, max_output, tok, self.eos_token):
                break
        return out


def eos_check(generated_count: int, max_output: int, token: int, eos_token: int) -> bool:
    """True when ``token`` (about to become output number ``generated_count``) ends the request."""
    return token == eos_token or generated_count + 1 >= max_output


# ---------------------------------------------------------------------------
# latency profiles


@dataclass(frozen=True)
class LatencyProfile:
    prefill_base: float
    prefill_per_token: float
    decode_base: float
    decode_per_seq: float
    decode_per_ctx_token: float = 0.0

    def __post_init__(self) -> None:
        if min(self.prefill_base, self.prefill_per_token, self.decode_base,
               self.decode_per_seq, self.decode_per_ctx_token) < 0:
            raise ValueError("latency coefficients must be non-negative")

    def prefill(self, input_lens: Sequence[int]) -> float:
        return self.prefill_base + self.prefill_per_token * sum(input_lens)

    def decode(self, batch: int, ctx_tokens: int = 0) -> float:
        return self.decode_base + self.decode_per_seq * batch + self.decode_per_ctx_token * ctx_tokens


MS = 1e-3

# decode bases sit at the per-model P50 TPOT plateaus (7.5 / 13.4 / 29.7 / 11.9 ms at batch ~16)
LATENCY_PRESETS: dict[str, LatencyProfile] = {
    "llama8b": LatencyProfile(5 * MS, 0.02 * MS, 7.18 * MS, 0.02 * MS),
    "phi15b": LatencyProfile(8 * MS, 0.04 * MS, 13.0 * MS, 0.025 * MS),
    "qwen32b": LatencyProfile(15 * MS, 0.08 * MS, 28.9 * MS, 0.05 * MS),
    "qwen30b-a3b": LatencyProfile(8 * MS, 0.03 * MS, 11.5 * MS, 0.025 * MS),
    # flat 10 ms decode step, used for the host-vs-device makespan comparison
    "flat10": LatencyProfile(10 * MS, 0.02 * MS, 10 * MS, 0.0),
}


def latency_preset(name: str, **overrides: float) -> LatencyProfile:
    if name == "custom":
        return LatencyProfile(**overrides)
    try:
        base = LATENCY_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown latency preset {name!r}") from None
    return replace(base, **overrides) if overrides else base


# ---------------------------------------------------------------------------
# graph cache


@dataclass(frozen=True)
class GraphKey:
    batch_capacity: int
    seq_capacity: int
    phase: Phase
    fallback: bool = False


@dataclass(frozen=True)
class GraphDescriptor:
    key: GraphKey
    latency: LatencyProfile
    memory_cost: int = GRAPH_MEMORY_COST

    def admits(self, batch: int, seq: int) -> bool:
        if self.key.fallback:
            return True
        return batch <= self.key.batch_capacity and seq <= self.key.seq_capacity


class GraphCache:
    """Dense (batch, seq) grid with O(1) tightest-fit lookup and a max-shape fallback."""

    def __init__(self, batch_grid: Sequence[int], seq_grid: Sequence[int],
                 latency: LatencyProfile) -> None:
        if not batch_grid or not seq_grid:
            raise EmptyGrid("batch and sequence grids must be nonempty")
        self.batch_grid = sorted(set(int(b) for b in batch_grid))
        self.seq_grid = sorted(set(int(s) for s in seq_grid))
        if self.batch_grid[0] < 1 or self.seq_grid[0] < 1:
            raise ValueError("grid values must be positive")
        self.max_batch = self.batch_grid[-1]
        self.max_seq = self.seq_grid[-1]
        self.latency = latency
        # ceiling-to-grid index tables, one entry per possible request value
        self._b_idx = np.searchsorted(self.batch_grid, np.arange(self.max_batch + 1), side="left")
        self._s_idx = np.searchsorted(self.seq_grid, np.arange(self.max_seq + 1), side="left")
        self.graphs: dict[Phase, list[list[GraphDescriptor]]] = {
            ph: [[GraphDescriptor(GraphKey(b, s, ph), latency) for s in self.seq_grid]
                 for b in self.batch_grid]
            for ph in Phase
        }
        self.fallback = {
            ph: GraphDescriptor(GraphKey(self.max_batch, self.max_seq, ph, fallback=True), latency)
            for ph in Phase
        }
        # one staging buffer set for the largest shape, shared by every graph
        self.shared_inputs = np.zeros((self.max_batch, self.max_seq), dtype=np.uint32)

    def __len__(self) -> int:
        return sum(len(row) for rows in self.graphs.values() for row in rows) + len(self.fallback)

    @property
    def memory_cost(self) -> int:
        return len(self) * GRAPH_MEMORY_COST

    def lookup(self, batch: int, seq: int, phase: Phase = Phase.PREFILL) -> GraphDescriptor:
        if batch < 0 or seq < 0:
            raise ValueError("shape must be non-negative")
        if batch > self.max_batch or seq > self.max_seq:
            return self.fallback[phase]
        return self.graphs[phase][self._b_idx[batch]][self._s_idx[seq]]


# ---------------------------------------------------------------------------
# execution


@dataclass(eq=False)
class ExtractionBuffer:
    """Device-resident output buffer polled by the scheduler."""

    tokens: Optional[list[int]] = None
    ready_at: float = float("inf")

    def clear(self) -> None:
        self.tokens = None
        self.ready_at = float("inf")

    def occupied(self, now: float) -> bool:
        return self.tokens is not None and now >= self.ready_at


@dataclass(frozen=True)
class SeqInput:
    seed: int
    phash: int
    position: int
    length: int  # prompt length (prefill) or current context length (decode)


@dataclass
class Engine:
    cache: GraphCache
    model: PseudoModel
    drop_deposits: bool = False  # fault injection: never signal completion
    launches: dict[str, int] = field(default_factory=lambda: {"prefill": 0, "decode": 0})

    def latency(self, graph: GraphDescriptor, batch: Sequence[SeqInput]) -> float:
        if not batch:
            return 0.0
        if graph.key.phase is Phase.PREFILL:
            return graph.latency.prefill([s.length for s in batch])
        return graph.latency.decode(len(batch), sum(s.length for s in batch))

    def execute(self, graph: GraphDescriptor, batch: Sequence[SeqInput], out: ExtractionBuffer,
                now: float) -> float:
        """Run ``graph`` over ``batch``; sampled tokens land in ``out`` after the returned latency."""
        out.clear()
        if not batch:
            out.tokens, out.ready_at = [], now
            return 0.0
        seq = max(s.length for s in batch)
        if not graph.admits(len(batch), seq):
            raise ShapeViolation(
                f"batch {len(batch)} x seq {seq} exceeds graph "
                f"({graph.key.batch_capacity}, {graph.key.seq_capacity})")
        self.launches[graph.key.phase.value] += 1
        lat = self.latency(graph, batch)
        if not self.drop_deposits:
            # sampling happens inside the graph; the scheduler only sees ids
            out.tokens = [self.model.token(s.seed, s.phash, s.position) for s in batch]
            out.ready_at = now + lat
        return lat
