"""Cloud autoscaling for a single training job.

Two scalers share one loop. The goodput scaler adds nodes once the job's
per-GPU goodput is a large enough fraction of its single-GPU ideal; the
throughput scaler applies the same rule with statistical efficiency pinned
to one, so it never waits for the noise scale to grow. Node counts only go
up.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .goodput import BatchConfig, GoodputError, GoodputModel, optimize_batch_table
from .sim import oracle
from .sim.profiles import ModelProfile

MODES = ("goodput", "throughput")
CSV_COLUMNS = ("t", "nodes", "phi", "efficiency", "cumulative_cost")


class AutoscaleError(ValueError):
    pass


@dataclass(frozen=True)
class AutoscalePolicy:
    upper: float = 2.0 / 3.0
    lower: float = 0.5
    gpus_per_node: int = 4
    price: float = 1.0  # per node-hour
    mode: str = "goodput"
    max_nodes: int = 16

    def __post_init__(self):
        if not 0 < self.lower <= self.upper <= 1:
            raise AutoscaleError("need 0 < lower <= upper <= 1")
        if self.mode not in MODES:
            raise AutoscaleError(f"unknown mode {self.mode!r}")
        if self.gpus_per_node < 1 or self.max_nodes < 1:
            raise AutoscaleError("gpus_per_node and max_nodes must be >= 1")
        if self.price < 0:
            raise AutoscaleError("price must be non-negative")


def _per_gpu(model: GoodputModel, nodes: np.ndarray, policy: AutoscalePolicy) -> np.ndarray:
    """Best objective value per GPU for each node count (0 node count -> one GPU)."""
    k = np.where(nodes > 0, nodes * policy.gpus_per_node, 1)
    table = optimize_batch_table(model, k, nodes > 1, policy.mode)
    return table.goodput / k


def decide_scale(model: GoodputModel, current_nodes: int, policy: AutoscalePolicy) -> int:
    """Node count for the next interval.

    Scales up only when per-GPU value on the current nodes is strictly above
    ``upper`` times the one-GPU ideal, and then to the smallest larger count
    whose per-GPU value has fallen to ``lower`` times the ideal or below (the
    largest allowed count if none has).
    """
    if current_nodes < 1:
        raise AutoscaleError("current_nodes must be >= 1")
    counts = np.arange(current_nodes, policy.max_nodes + 1)
    values = _per_gpu(model, np.concatenate([[0], counts]), policy)
    ideal, values = values[0], values[1:]
    if not ideal > 0 or not values[0] > policy.upper * ideal:
        return current_nodes
    below = np.nonzero(values[1:] <= policy.lower * ideal)[0]
    return int(counts[1:][below[0]]) if len(below) else max(current_nodes, policy.max_nodes)


def cost(segments: Sequence[tuple[float, int]], price: float = 1.0) -> tuple[float, float]:
    """(node-hours, currency) for a schedule of (duration seconds, node count) pieces."""
    node_hours = sum(dt * n for dt, n in segments) / 3600.0
    return node_hours, node_hours * price


def rescale_phi(profile: ModelProfile, growth: float) -> ModelProfile:
    """Copy of a profile whose noise scale rises geometrically by ``growth``
    over training, ending where the original ends."""
    if not growth >= 1:
        raise AutoscaleError("growth must be >= 1")
    rows = []
    for r in profile.pgns:
        frac = min(max(r["epoch"] / profile.target_epochs, 0.0), 1.0)
        end = profile.phi(profile.target_epochs, r["total_batch"])
        rows.append({**r, "phi": round(end * growth ** (frac - 1.0), 6)})
    return replace(profile, pgns=rows)


@dataclass(frozen=True)
class AutoscaleRow:
    t: float
    nodes: int
    phi: float
    efficiency: float
    cumulative_cost: float


@dataclass(frozen=True)
class AutoscaleReport:
    rows: tuple[AutoscaleRow, ...]
    completion_time: float
    node_hours: float
    cost: float

    @property
    def nodes(self) -> np.ndarray:
        return np.array([r.nodes for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow((repr(round(r.t, 6)), r.nodes, repr(round(r.phi, 6)), repr(round(r.efficiency, 6)), repr(round(r.cumulative_cost, 6))))
        return buf.getvalue()


def simulate(
    profile: ModelProfile,
    policy: AutoscalePolicy = AutoscalePolicy(),
    interval: float = 60.0,
    realloc_delay: float = 30.0,
    start_nodes: int = 1,
    max_seconds: Optional[float] = None,
) -> AutoscaleReport:
    """Train one job to completion while the scaler resizes its cluster.

    The scaler sees the profile's fitted throughput model and the current
    noise scale; the job's progress replays the profile itself. Rates are held
    constant within each interval, and every resize costs ``realloc_delay``
    seconds of lost training (still billed).
    """
    if interval <= 0:
        raise AutoscaleError("interval must be positive")
    params = oracle.profile_params(profile)
    nodes = start_nodes
    t = progress = spent = 0.0
    batch = profile.m0
    rows: list[AutoscaleRow] = []
    segments: list[tuple[float, int]] = []
    limit = max_seconds if max_seconds is not None else 1e3 * interval * profile.target_epochs
    while progress < profile.target_epochs:
        if t > limit:
            raise AutoscaleError(f"job did not finish within {limit:.0f}s")
        phi = profile.phi(progress, batch)
        model = GoodputModel(params, phi, profile.m0, profile.max_batch, profile.max_per_gpu_batch)
        target = decide_scale(model, nodes, policy)
        delay = realloc_delay if target != nodes else 0.0
        nodes = target
        k = nodes * policy.gpus_per_node
        table = optimize_batch_table(model, [k], [nodes > 1], policy.mode)
        m, s = int(table.per_gpu_batch[0]), int(table.accum_steps[0])
        if m < 1:
            raise GoodputError(f"no feasible batch on {nodes} nodes")
        batch = k * m * (s + 1)
        phi = profile.phi(progress, batch)
        eff = (phi + profile.m0) / (phi + batch)
        t_iter = profile.t_iter(oracle.spread(k, nodes), BatchConfig(m, s))
        rate = eff * batch / profile.dataset_size / t_iter  # epochs per second
        train = max(interval - delay, 0.0)
        need = (profile.target_epochs - progress) / rate
        if need <= train:
            dt, progress = delay + need, profile.target_epochs
        else:
            dt, progress = interval, progress + rate * train
        segments.append((dt, nodes))
        spent += cost([(dt, nodes)], policy.price)[1]
        rows.append(AutoscaleRow(t, nodes, phi, eff, spent))
        t += dt
    node_hours, total = cost(segments, policy.price)
    return AutoscaleReport(tuple(rows), t, node_hours, total)


def compare(profile: ModelProfile, policy: AutoscalePolicy = AutoscalePolicy(), **kwargs) -> dict:
    """Goodput vs throughput scaling on the same profile."""
    good = simulate(profile, replace(policy, mode="goodput"), **kwargs)
    thr = simulate(profile, replace(policy, mode="throughput"), **kwargs)
    return {
        "goodput": good,
        "throughput": thr,
        "cost_saving": 1.0 - good.cost / thr.cost if thr.cost > 0 else math.nan,
        "time_increase": good.completion_time / thr.completion_time - 1.0,
    }
