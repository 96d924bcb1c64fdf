"""Load sweeps against the in-process system."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..config import Config
from ..frontend import NoFreeSlot, RequestRecord, Status
from ..ring_buffer import ArenaExhausted
from ..runtime import At, make_runtime
from ..system import System, build_system
from .interference import Interferer, inject_interference
from .metrics import (DegenerateCurve, MetricsError, RateReport, TimingRecord, compute_metrics,
                      fit_saturation, geo_mean, serviceable_load, summarize_range, write_csv)
from .workload import Arrival, WorkloadSpec, default_rates, generate, parse_lengths

logger = logging.getLogger(__name__)

RETRY_BACKOFF = 1e-3


@dataclass
class RunResult:
    report: Optional[RateReport]
    records: list[RequestRecord]
    measured: list[TimingRecord]
    failures: list[str] = field(default_factory=list)
    rejects: int = 0
    system: Optional[System] = None
    elapsed: float = 0.0


def timing_of(rec: RequestRecord) -> TimingRecord:
    return TimingRecord(rec.arrival_time, rec.first_token_time, rec.last_token_time, len(rec.tokens),
                        list(rec.token_times), rec.submit_time)


def check_invariants(sys: System, records: Sequence[RequestRecord],
                     report: Optional[RateReport]) -> list[str]:
    failures = []
    model = sys.engine.model
    for rec in records:
        if rec.status is not Status.DONE:
            failures.append(f"request {rec.request_id} ended {rec.status.value}: {rec.error}")
            continue
        if rec.tokens != model.sequence(rec.seed, rec.prompt, rec.max_output):
            failures.append(f"request {rec.request_id}: streamed tokens differ from the model sequence")
        if rec.first_token_time < rec.submit_time:
            failures.append(f"request {rec.request_id}: first token before submission")
    if sys.transport.one_sided_guarantee_audit():
        failures.append("device-plane code ran during a transfer")
    w = sys.scheduler.window
    if w.max_counter > w.limit:
        failures.append(f"launch window reached {w.max_counter} > {w.limit}")
    if report is not None:
        for name in ("ttft", "tpot", "itl"):
            d = getattr(report, name)
            seq = [d.p50, d.p95, d.p99, d.p999]
            if not any(math.isnan(x) for x in seq) and any(b < a for a, b in zip(seq, seq[1:])):
                failures.append(f"{name} percentiles not monotone: {seq}")
    return failures


def _client(sys: System, arr: Arrival, out: list, counters: dict):
    fe = sys.frontend
    rec = fe.new_request(arr.prompt, arr.max_output, arr.seed)
    out.append(rec)
    while True:
        try:
            yield from fe.submit(rec)
            return
        except (NoFreeSlot, ArenaExhausted):
            # a rejected client retries; the wait counts toward its TTFT
            counters["rejects"] += 1
            rec.status, rec.error = Status.QUEUED, None
            yield RETRY_BACKOFF


def _driver(sys: System, arrivals: Sequence[Arrival], out: list, counters: dict):
    t0 = sys.runtime.now()
    for arr in arrivals:
        yield At(t0 + arr.time)
        sys.runtime.spawn(_client(sys, arr, out, counters), "client")


def run_rate(cfg: Config, mode: str, rate: float, arrivals: Sequence[Arrival], *,
             interference: Optional[Interferer] = None, warmup: float = 0.0,
             drain_timeout: float = 120.0, rate_label: Optional[float] = None) -> RunResult:
    """Run one offered load to completion and aggregate requests arriving after ``warmup``."""
    rt = make_runtime(cfg.transport.mode)
    mult = interference.host_multiplier if interference is not None else None
    sys = build_system(cfg, mode, runtime=rt, host_multiplier=mult)
    records: list[RequestRecord] = []
    counters = {"rejects": 0}
    n = len(arrivals)
    tracker = sys.frontend.tracker
    rt.spawn(_driver(sys, arrivals, records, counters), "driver")
    sys.start()
    horizon = (arrivals[-1].time if arrivals else 0.0) + drain_timeout
    start = rt.now()
    try:
        rt.run(until=start + horizon, stop=lambda: tracker.done_count >= n)
    finally:
        sys.stop()
    elapsed = rt.now() - start
    failures = []
    if tracker.done_count < n:
        failures.append(f"only {tracker.done_count} of {n} requests finished within the drain timeout")
    measured_recs = [r for r in records if r.status is Status.DONE and r.arrival_time - start >= warmup]
    measured = [timing_of(r) for r in measured_recs]
    for t in measured:
        t.arrival -= start
        t.first_token -= start
        t.last_token -= start
        t.token_times = [x - start for x in t.token_times]
    interf = interference.threads if interference is not None else 0
    report = None
    if measured:
        window = (warmup, max(t.last_token for t in measured))
        try:
            report = compute_metrics(measured, rate_label if rate_label is not None else rate, mode,
                                     interf, window)
        except MetricsError as exc:
            failures.append(str(exc))
    failures += check_invariants(sys, records, report)
    for name, vals in (("ttft", [t.ttft for t in measured]), ("itl", [g for t in measured for g in t.itls()])):
        vals = [v for v in vals if v > 0]
        if vals and geo_mean(vals) > float(np.mean(vals)) * (1 + 1e-12):
            failures.append(f"{name}: geometric mean exceeds arithmetic mean")
    return RunResult(report, records, measured, failures, counters["rejects"], sys, elapsed)


def workload_for(cfg: Config, rate: float, vocab: int = 256) -> WorkloadSpec:
    b = cfg.bench
    count = b.requests_per_rate
    return WorkloadSpec(rate=rate, arrival=b.arrival,
                        duration=None if count else b.duration + b.warmup_seconds,
                        count=count, prompt=parse_lengths(b.prompt, 0),
                        output=parse_lengths(b.output, 1), vocab=vocab)


@dataclass
class SweepResult:
    reports: list[RateReport]
    failures: list[str]
    knee: Optional[float] = None
    serviceable: float = 0.0


def run_sweep(cfg: Config, mode: str, rates: Optional[Sequence[float]] = None,
              interference_threads: Optional[int] = None, out: Optional[str] = None) -> SweepResult:
    cfg = copy.deepcopy(cfg)
    b = cfg.bench
    rates = list(rates or b.rates or default_rates(b.load_scale))
    threads = b.interference_threads if interference_threads is None else interference_threads
    reports, failures = [], []
    interferer = None
    if threads:
        interferer = inject_interference(threads, cfg.transport.mode,
                                         multiplier=b.interference_multiplier)
    try:
        for k, rate in enumerate(rates):
            arrivals = generate(workload_for(cfg, rate), b.seed + k)
            res = run_rate(cfg, mode, rate, arrivals, interference=interferer,
                           warmup=b.warmup_seconds)
            failures += [f"rate {rate:g}: {f}" for f in res.failures]
            if res.report is not None:
                res.report.seed = b.seed + k
                reports.append(res.report)
                logger.info("rate %g %s: %.3f req/s, P99 TTFT %.4f s", rate, mode,
                            res.report.throughput_rps, res.report.ttft.p99)
    finally:
        if interferer is not None:
            interferer.stop()
    result = SweepResult(reports, failures)
    curve = [(r.rate, r.throughput_rps) for r in reports]
    result.serviceable = serviceable_load(curve) if curve else 0.0
    if len({r.rate for r in reports}) >= 4:
        try:
            result.knee = fit_saturation(curve)
            summarize_range(reports, result.knee)
        except DegenerateCurve:
            logger.info("throughput never plateaued over the swept loads")
        except MetricsError as exc:
            failures.append(str(exc))
    if out:
        write_csv(out, reports)
    return result
