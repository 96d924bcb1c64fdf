"""Latency/throughput aggregation, saturation fitting and operating-range summaries."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

PERCENTILES = (50.0, 95.0, 99.0, 99.9)
CSV_HEADER = ("rate,mode,interference,throughput_rps,throughput_tps,"
              "ttft_p50,ttft_p95,ttft_p99,ttft_p999,ttft_mean,"
              "tpot_p50,tpot_p95,tpot_p99,tpot_p999,tpot_mean,"
              "itl_p50,itl_p99,itl_p999")


class MetricsError(ValueError):
    pass


class DegenerateCurve(MetricsError):
    pass


@dataclass
class TimingRecord:
    arrival: float
    first_token: float
    last_token: float
    n_out: int
    token_times: list[float] = field(default_factory=list)
    submit: Optional[float] = None

    @property
    def ttft(self) -> float:
        return self.first_token - self.arrival

    @property
    def tpot(self) -> Optional[float]:
        if self.n_out < 2:
            return None
        return (self.last_token - self.first_token) / (self.n_out - 1)

    def itls(self) -> list[float]:
        tt = self.token_times
        return [tt[k + 1] - tt[k] for k in range(len(tt) - 1)]


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank: the smallest value with at least p% of the data at or below it."""
    if not len(values):
        return math.nan
    s = sorted(values)
    rank = max(1, math.ceil(p / 100.0 * len(s) - 1e-9))
    return float(s[rank - 1])


@dataclass
class Dist:
    p50: float
    p95: float
    p99: float
    p999: float
    mean: float

    @classmethod
    def of(cls, values: Sequence[float]) -> "Dist":
        ps = [percentile(values, p) for p in PERCENTILES]
        mean = float(np.mean(values)) if len(values) else math.nan
        return cls(*ps, mean)


@dataclass
class RateReport:
    rate: float
    mode: str
    interference: int
    throughput_rps: float
    throughput_tps: float
    ttft: Dist
    tpot: Dist
    itl: Dist
    completed: int = 0
    seed: int = 0

    def csv_row(self) -> str:
        vals = [self.throughput_rps, self.throughput_tps,
                self.ttft.p50, self.ttft.p95, self.ttft.p99, self.ttft.p999, self.ttft.mean,
                self.tpot.p50, self.tpot.p95, self.tpot.p99, self.tpot.p999, self.tpot.mean,
                self.itl.p50, self.itl.p99, self.itl.p999]
        return ",".join([f"{self.rate:g}", self.mode, str(self.interference)] + [f"{v:.6g}" for v in vals])


def compute_metrics(records: Sequence[TimingRecord], rate: float = 0.0, mode: str = "",
                    interference: int = 0, window: Optional[tuple[float, float]] = None) -> RateReport:
    """Aggregate per-request timings.  Throughput spans ``window`` or first arrival..last token."""
    if not records:
        raise MetricsError("no records to aggregate")
    ttft = [r.ttft for r in records]
    tpot = [t for t in (r.tpot for r in records) if t is not None]
    itl = [g for r in records for g in r.itls()]
    if window is None:
        window = (min(r.arrival for r in records), max(r.last_token for r in records))
    span = window[1] - window[0]
    if span <= 0:
        raise MetricsError("measurement window has no duration")
    n_tokens = sum(r.n_out for r in records)
    return RateReport(rate, mode, interference, len(records) / span, n_tokens / span,
                      Dist.of(ttft), Dist.of(tpot), Dist.of(itl), completed=len(records))


def write_csv(path, reports: Iterable[RateReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in reports:
            fh.write(r.csv_row() + "\n")


# ---------------------------------------------------------------------------
# curves


def average_by_rate(points: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    acc: dict[float, list[float]] = defaultdict(list)
    for lam, y in points:
        acc[float(lam)].append(float(y))
    return [(lam, float(np.mean(ys))) for lam, ys in sorted(acc.items())]


def _segment_sse(xs: np.ndarray, ys: np.ndarray, k: int) -> float:
    """Slope-through-origin on points[:k+1], constant on points[k:] (the knee belongs to both)."""
    x1, y1 = xs[:k + 1], ys[:k + 1]
    slope = float(x1 @ y1) / float(x1 @ x1)
    e1 = float(np.sum((y1 - slope * x1) ** 2))
    y2 = ys[k:]
    e2 = float(np.sum((y2 - y2.mean()) ** 2))
    return e1 + e2


def fit_saturation(points: Iterable[tuple[float, float]]) -> float:
    """Offered load where a linear-growth segment hands over to a plateau."""
    curve = average_by_rate(points)
    if len(curve) < 4:
        raise MetricsError("need at least four distinct offered loads")
    xs = np.array([p[0] for p in curve])
    ys = np.array([p[1] for p in curve])
    if np.any(xs <= 0):
        raise MetricsError("offered loads must be positive")
    slope = float(xs @ ys) / float(xs @ xs)
    if float(np.sum((ys - slope * xs) ** 2)) <= 1e-12 * max(1.0, float(ys @ ys)):
        raise DegenerateCurve("curve is a line through the origin; no plateau to fit")
    best_k, best = -1, math.inf
    for k in range(1, len(xs) - 1):  # both segments keep at least two points
        err = _segment_sse(xs, ys, k)
        if err < best - 1e-12:
            best_k, best = k, err
    return float(xs[best_k])


def serviceable_load(curve: Iterable[tuple[float, float]], threshold: float = 0.95) -> float:
    best = 0.0
    for lam, y in curve:
        if y >= threshold * lam and lam > best:
            best = float(lam)
    return best


def geo_mean(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan
    if np.any(v <= 0):
        raise MetricsError("geometric mean needs positive values")
    return float(np.exp(np.mean(np.log(v))))


@dataclass
class RangeSummary:
    ttft_p99_geo: float
    tpot_p99_geo: float
    throughput_at_knee: float
    rates: list[float]


def _by_rate(reports: Sequence[RateReport], attr) -> dict[float, float]:
    acc: dict[float, list[float]] = defaultdict(list)
    for r in reports:
        acc[r.rate].append(attr(r))
    return {lam: float(np.mean(v)) for lam, v in sorted(acc.items())}


def summarize_range(reports: Sequence[RateReport], knee: float) -> RangeSummary:
    """Geometric means of rate-averaged P99 TTFT/TPOT over loads up to ``knee``."""
    ttft = _by_rate(reports, lambda r: r.ttft.p99)
    tpot = _by_rate(reports, lambda r: r.tpot.p99)
    thr = _by_rate(reports, lambda r: r.throughput_rps)
    rates = [lam for lam in ttft if lam <= knee + 1e-9]
    if not rates:
        raise MetricsError(f"no reports at or below load {knee}")
    at_knee = min(thr, key=lambda lam: abs(lam - knee))
    return RangeSummary(geo_mean([ttft[r] for r in rates]),
                        geo_mean([tpot[r] for r in rates if not math.isnan(tpot[r])]),
                        thr[at_knee], rates)


@dataclass
class Bracket:
    low: float
    high: float

    def __contains__(self, x: float) -> bool:
        return self.low <= x <= self.high


def retention_brackets(isolated: Sequence[RateReport], interfered: Sequence[RateReport]) -> dict[str, Bracket]:
    """Interfered/isolated ratios over the common loads: throughput retention and P99 inflation."""
    out = {}
    for name, attr in (("throughput", lambda r: r.throughput_rps),
                       ("ttft_p99", lambda r: r.ttft.p99),
                       ("tpot_p99", lambda r: r.tpot.p99)):
        a, b = _by_rate(isolated, attr), _by_rate(interfered, attr)
        ratios = [b[lam] / a[lam] for lam in a if lam in b and a[lam] > 0]
        if not ratios:
            raise MetricsError("reports share no offered load")
        out[name] = Bracket(min(ratios), max(ratios))
    return out
