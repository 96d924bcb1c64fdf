from .bench import RunResult, SweepResult, check_invariants, run_rate, run_sweep, workload_for
from .interference import Interferer, default_hog_count, inject_interference
from .metrics import (CSV_HEADER, Bracket, DegenerateCurve, Dist, MetricsError, RangeSummary, RateReport,
                      TimingRecord, average_by_rate, compute_metrics, fit_saturation, geo_mean, percentile,
                      retention_brackets, serviceable_load, summarize_range, write_csv)
from .workload import (Arrival, LengthDist, WorkloadError, WorkloadSpec, default_rates, generate,
                       parse_lengths, read_trace)

__all__ = [
    "Arrival", "Bracket", "CSV_HEADER", "DegenerateCurve", "Dist", "Interferer", "LengthDist", "MetricsError",
    "RangeSummary", "RateReport", "RunResult", "SweepResult", "TimingRecord", "WorkloadError", "WorkloadSpec",
    "average_by_rate", "check_invariants", "compute_metrics", "default_hog_count", "default_rates",
    "fit_saturation", "generate", "geo_mean", "inject_interference", "parse_lengths", "percentile",
    "read_trace", "retention_brackets", "run_rate", "run_sweep", "serviceable_load", "summarize_range",
    "workload_for", "write_csv",
]
