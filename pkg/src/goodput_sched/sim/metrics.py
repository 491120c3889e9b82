"""Per-job outcomes, summary statistics and finish-time fairness."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Mapping, Optional, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .simulator import World

CSV_COLUMNS = ("job_id", "category", "submit_s", "start_s", "complete_s", "jct_s", "restarts", "rho")
TIMELINE_COLUMNS = ("t", "active_jobs", "allocated_gpus", "mean_efficiency")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class JobRecord:
    job_id: str
    category: str
    model: str
    submit_s: float
    start_s: Optional[float]
    complete_s: float
    restarts: int
    avg_active_jobs: float
    examples: float
    useful_examples: float
    gpu_seconds: float
    rho: Optional[float] = None

    @property
    def jct_s(self) -> float:
        return self.complete_s - self.submit_s


def _num(x: Optional[float]) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(round(float(x), 6))


@dataclass(frozen=True)
class MetricsReport:
    records: tuple[JobRecord, ...]
    timeline: tuple[tuple, ...] = ()

    @classmethod
    def from_world(cls, world: "World") -> "MetricsReport":
        times = np.array([row[0] for row in world.timeline] + [world.time])
        active = np.array([row[1] for row in world.timeline], dtype=float)
        records = []
        for job in world.jobs:
            lo, hi = job.spec.submit_time, job.completion_time
            overlap = np.clip(np.minimum(times[1:], hi) - np.maximum(times[:-1], lo), 0.0, None)
            span = hi - lo
            avg = float(np.dot(overlap, active) / span) if span > 0 else 1.0
            records.append(
                JobRecord(
                    job.job_id,
                    job.spec.category,
                    job.spec.model,
                    lo,
                    job.start_time,
                    hi,
                    job.restarts,
                    max(avg, 1.0),
                    job.examples,
                    job.useful_examples,
                    job.attained_service,
                )
            )
        records.sort(key=lambda r: r.job_id)
        return cls(tuple(records), tuple(world.timeline))

    # -- statistics ------------------------------------------------------------

    @property
    def jcts(self) -> np.ndarray:
        return np.array([r.jct_s for r in self.records])

    def summary(self) -> dict:
        if not self.records:
            return {"avg_jct": None, "p99_jct": None, "makespan": None, "avg_rho": None, "max_rho": None}
        jct = self.jcts
        rhos = [r.rho for r in self.records if r.rho is not None]
        makespan = max(r.complete_s for r in self.records) - min(r.submit_s for r in self.records)
        return {
            "avg_jct": round(float(jct.mean()), 6),
            "p99_jct": round(float(np.percentile(jct, 99)), 6),
            "makespan": round(float(makespan), 6),
            "avg_rho": round(float(np.mean(rhos)), 6) if rhos else None,
            "max_rho": round(float(np.max(rhos)), 6) if rhos else None,
        }

    def with_rho(self, rho: Mapping[str, float]) -> "MetricsReport":
        return MetricsReport(tuple(replace(r, rho=rho.get(r.job_id)) for r in self.records), self.timeline)

    # -- serialization ------------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            w.writerow(
                (r.job_id, r.category, _num(r.submit_s), _num(r.start_s), _num(r.complete_s), _num(r.jct_s), r.restarts, _num(r.rho))
            )
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True) + "\n"

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TIMELINE_COLUMNS)
        for t, n, g, e in self.timeline:
            w.writerow((_num(t), n, g, _num(e)))
        return buf.getvalue()


def finish_time_fairness(report: MetricsReport, isolated_jcts: Mapping[str, float]) -> dict[str, float]:
    """rho_j = shared JCT / isolated JCT for every job in the report."""
    missing = [r.job_id for r in report.records if r.job_id not in isolated_jcts]
    if missing:
        raise MetricsError(f"no isolated run for {', '.join(missing[:5])}{'...' if len(missing) > 5 else ''}")
    return {r.job_id: r.jct_s / isolated_jcts[r.job_id] for r in report.records}


def parse_metrics_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def mean_ci(values: Sequence[float], confidence: float = 0.95) -> tuple[float, float]:
    """Mean and half-width of a Student-t confidence interval."""
    from scipy import stats

    x = np.asarray(values, dtype=float)
    if len(x) == 0:
        raise MetricsError("no values")
    if len(x) == 1:
        return float(x[0]), 0.0
    half = stats.t.ppf(0.5 + confidence / 2, len(x) - 1) * x.std(ddof=1) / math.sqrt(len(x))
    return float(x.mean()), float(half)
