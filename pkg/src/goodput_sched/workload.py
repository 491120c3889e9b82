"""Job traces and the synthetic workloads built from them."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .sim import oracle
from .sim.profiles import ProfileLibrary

CATEGORIES = ("S", "M", "L", "XL")
# Half-open GPU-hour buckets [lo, hi); anything above the last bound stays XL.
CATEGORY_BOUNDS = {"S": (0.0, 1.0), "M": (1.0, 10.0), "L": (10.0, 100.0), "XL": (100.0, 1000.0)}
CATEGORY_FRACTIONS = {"S": 0.72, "M": 0.20, "L": 0.06, "XL": 0.02}
TRACE_HEADER = ("submit_s", "gpus", "duration_s")
MODES = ("pollux", "tuned", "realistic")
SCALING_BAND = (0.5, 0.8)

# Trace shape: GPUs requested per category, and log-normal GPU-hours.
_TRACE_GPUS = {"S": (1, 1, 1, 2), "M": (1, 2, 4), "L": (2, 4, 8), "XL": (8, 16)}
_TRACE_LOG_SIGMA = 0.6


class WorkloadError(ValueError):
    pass


def categorize(gpu_time_hours: float) -> str:
    if not gpu_time_hours >= 0:
        raise WorkloadError("GPU-time must be non-negative")
    for cat in CATEGORIES:
        lo, hi = CATEGORY_BOUNDS[cat]
        if lo <= gpu_time_hours < hi:
            return cat
    return "XL"


@dataclass(frozen=True)
class TraceJob:
    submit_s: float
    gpus: int
    duration_s: float

    def __post_init__(self):
        if self.submit_s < 0 or self.duration_s < 0:
            raise WorkloadError("times must be non-negative")
        if self.gpus < 1:
            raise WorkloadError("gpus must be >= 1")

    @property
    def gpu_hours(self) -> float:
        return self.gpus * self.duration_s / 3600.0


def _fmt(x: float) -> str:
    return f"{x:.3f}"


def dump_trace(jobs: Sequence[TraceJob]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for j in jobs:
        w.writerow((_fmt(j.submit_s), j.gpus, _fmt(j.duration_s)))
    return buf.getvalue()


def parse_trace(text: str) -> list[TraceJob]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    header = tuple(c.strip() for c in rows[0])
    if header != TRACE_HEADER:
        raise WorkloadError(f"line 1: expected header {','.join(TRACE_HEADER)}, got {','.join(header)}")
    jobs = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise WorkloadError(f"line {lineno}: expected 3 fields, got {len(row)}")
        try:
            jobs.append(TraceJob(float(row[0]), int(row[1]), float(row[2])))
        except ValueError as exc:
            raise WorkloadError(f"line {lineno}: {exc}") from None
    return sorted(jobs, key=lambda j: j.submit_s)


def load_trace(path: Union[str, Path]) -> list[TraceJob]:
    return parse_trace(Path(path).read_text())


def save_trace(path: Union[str, Path], jobs: Sequence[TraceJob]) -> None:
    Path(path).write_text(dump_trace(jobs))


def category_counts(num_jobs: int) -> dict[str, int]:
    """Split a job count across categories by largest remainder."""
    raw = {c: CATEGORY_FRACTIONS[c] * num_jobs for c in CATEGORIES}
    counts = {c: int(math.floor(v)) for c, v in raw.items()}
    short = num_jobs - sum(counts.values())
    for c in sorted(CATEGORIES, key=lambda c: (-(raw[c] - counts[c]), CATEGORIES.index(c)))[:short]:
        counts[c] += 1
    return counts


def generate_trace(seed: int, num_jobs: int = 160, hours: float = 8.0, load_multiplier: float = 1.0) -> list[TraceJob]:
    """Poisson arrivals over the window with the category mix fixed exactly."""
    if load_multiplier <= 0:
        raise WorkloadError("load multiplier must be positive")
    rng = np.random.default_rng(seed)
    n = max(1, int(round(num_jobs * load_multiplier)))
    counts = category_counts(n)
    cats = np.array([c for c in CATEGORIES for _ in range(counts[c])])
    rng.shuffle(cats)
    # Given the count, Poisson arrival times are uniform order statistics.
    submits = np.sort(rng.uniform(0.0, hours * 3600.0, size=n))
    jobs = []
    for t, cat in zip(submits, cats):
        lo, hi = CATEGORY_BOUNDS[cat]
        lo = max(lo, 0.05)
        center = math.sqrt(lo * hi)
        gh = float(np.clip(center * math.exp(rng.normal(0.0, _TRACE_LOG_SIGMA)), lo, hi * 0.999))
        gpus = int(rng.choice(_TRACE_GPUS[cat]))
        jobs.append(TraceJob(round(float(t), 3), gpus, round(gh * 3600.0 / gpus, 3)))
    return jobs


# --- workload specs ------------------------------------------------------------


@dataclass(frozen=True)
class JobSpec:
    job_id: str
    model: str
    submit_time: float
    category: str
    mode: str
    gpus: Optional[int] = None
    batch: Optional[int] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise WorkloadError(f"unknown mode {self.mode!r}")
        if self.mode != "pollux" and (self.gpus is None or self.batch is None):
            raise WorkloadError(f"{self.job_id}: {self.mode} jobs need fixed gpus and batch")


@dataclass(frozen=True)
class WorkloadSpec:
    jobs: tuple[JobSpec, ...]
    mode: str
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {"mode": self.mode, "seed": self.seed, "jobs": [asdict(j) for j in self.jobs]}, indent=1, sort_keys=True
        )

    @classmethod
    def from_json(cls, text: str) -> "WorkloadSpec":
        d = json.loads(text)
        try:
            return cls(tuple(JobSpec(**j) for j in d["jobs"]), d["mode"], int(d["seed"]))
        except (KeyError, TypeError) as exc:
            raise WorkloadError(f"malformed workload: {exc}") from None


def model_categories(profiles: ProfileLibrary) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {c: [] for c in CATEGORIES}
    for name in sorted(profiles):
        out[categorize(oracle.gpu_hours(profiles[name]))].append(name)
    return out


def tuned_configs(profiles: ProfileLibrary, model: str, max_gpus: int = 64) -> list[tuple[int, int]]:
    """(gpus, batch) pairs whose best fixed batch reaches 50-80% of ideal scaling.

    Falls back to the single count closest to the band when none qualifies.
    """
    table = oracle.scaling_table(profiles.get_model(model), max_gpus)
    lo, hi = SCALING_BAND
    valid = [(k, b) for k, (b, _, eff) in table.items() if lo <= eff <= hi]
    if valid:
        return valid
    k = min(table, key=lambda k: (min(abs(table[k][2] - lo), abs(table[k][2] - hi)), k))
    return [(k, table[k][0])]


def synthesize(
    trace: Sequence[TraceJob], profiles: ProfileLibrary, seed: int, mode: str = "pollux", max_gpus: int = 64
) -> WorkloadSpec:
    """Map each trace job to a model of the same size category and configure it.

    Models are balanced within each category; tuned jobs draw from their
    model's valid (gpus, batch) set; realistic jobs copy the trace GPU count
    and use a batch of M0 times that count.
    """
    if mode not in MODES:
        raise WorkloadError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    by_cat = model_categories(profiles)
    trace = sorted(trace, key=lambda j: j.submit_s)
    cats = [categorize(j.gpu_hours) for j in trace]
    assigned: list[str] = [""] * len(trace)
    for cat in CATEGORIES:
        idx = [i for i, c in enumerate(cats) if c == cat]
        if not idx:
            continue
        models = by_cat[cat]
        if not models:
            raise WorkloadError(f"no model in category {cat}")
        pool = [models[i % len(models)] for i in range(len(idx))]
        for i, name in zip(idx, rng.permutation(pool)):
            assigned[i] = str(name)
    jobs = []
    for i, (tj, cat, name) in enumerate(zip(trace, cats, assigned)):
        gpus = batch = None
        if mode == "tuned":
            options = tuned_configs(profiles, name, max_gpus)
            gpus, batch = options[int(rng.integers(len(options)))]
        elif mode == "realistic":
            prof = profiles.get_model(name)
            gpus = min(tj.gpus, max_gpus)
            batch = min(prof.m0 * gpus, prof.max_batch)
        jobs.append(JobSpec(f"job-{i:04d}", name, tj.submit_s, cat, mode, gpus, batch))
    return WorkloadSpec(tuple(jobs), mode, seed)
