"""Cluster-level objective: speedups over fair share, the power-mean fitness,
the re-allocation penalty and cluster utility."""

from __future__ import annotations

import json
import math
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from ..goodput import AllocationVector, AllocLike, GoodputModel, optimize_batch_table

SPEEDUP_OFFSET = 1e-3


class AllocationError(ValueError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    resources: Mapping[str, int]

    def __post_init__(self):
        if any(v < 0 for v in self.resources.values()):
            raise AllocationError("node capacities must be non-negative")

    @classmethod
    def gpus(cls, n: int, **extra: int) -> "NodeSpec":
        return cls({"gpu": n, **extra})


@dataclass
class SchedJobInfo:
    goodput_model: GoodputModel
    current_allocation: Optional[np.ndarray] = None
    resources_per_replica: Mapping[str, int] = field(default_factory=lambda: {"gpu": 1})
    age: float = 0.0
    num_restarts: int = 0
    min_replicas: int = 0
    max_replicas: Optional[int] = None
    pinned: bool = False
    job_id: str = ""
    # Baseline-policy inputs; unused by the goodput-driven search.
    submit_time: float = 0.0
    requested_gpus: int = 1
    attained_service: float = 0.0
    fixed_batch: Optional[int] = None
    remaining_examples: float = math.inf

    def __post_init__(self):
        if self.age < 0:
            raise AllocationError("age must be non-negative")
        if self.max_replicas is not None and not 0 <= self.min_replicas <= self.max_replicas:
            raise AllocationError("need 0 <= min_replicas <= max_replicas")


@dataclass(frozen=True)
class FitnessConfig:
    p: float = -1.0
    realloc_delay: float = 30.0
    interference_avoidance: bool = True
    max_nodes_per_job: int = 16

    def __post_init__(self):
        if self.realloc_delay < 0:
            raise AllocationError("realloc delay must be non-negative")


@dataclass(frozen=True)
class FairShare:
    dominant_share: float
    replicas: int
    nodes: int
    goodput: float


def resource_types(jobs: Sequence[SchedJobInfo]) -> list[str]:
    return sorted(set().union(*[set(j.resources_per_replica) for j in jobs]) | {"gpu"})


def resource_arrays(jobs: Sequence[SchedJobInfo], nodes: Sequence[NodeSpec]):
    rtypes = resource_types(jobs)
    job_res = np.array([[j.resources_per_replica.get(r, 0) for r in rtypes] for j in jobs], dtype=np.int64)
    node_res = np.array([[n.resources.get(r, 0) for r in rtypes] for n in nodes], dtype=np.int64)
    return rtypes, job_res.reshape(len(jobs), len(rtypes)), node_res.reshape(len(nodes), len(rtypes))


def current_matrix(jobs: Sequence[SchedJobInfo], num_nodes: int) -> np.ndarray:
    base = np.zeros((len(jobs), num_nodes), dtype=np.int64)
    for j, job in enumerate(jobs):
        if job.current_allocation is not None:
            base[j] = np.asarray(job.current_allocation, dtype=np.int64)
    return base


def fair_share(jobs: Sequence[SchedJobInfo], nodes: Sequence[NodeSpec]) -> list[FairShare]:
    """Fair allocation shape and goodput per job, from dominant resource shares."""
    if not nodes:
        raise AllocationError("need at least one node")
    if not jobs:
        return []
    rtypes, job_res, node_res = resource_arrays(jobs, nodes)
    total = node_res.sum(axis=0)
    missing = (job_res > 0) & (total == 0)
    if missing.any():
        j, r = np.argwhere(missing)[0]
        raise AllocationError(f"job {j} requests {rtypes[r]!r}, which the cluster lacks")
    with np.errstate(divide="ignore", invalid="ignore"):
        shares = np.where(job_res > 0, job_res / total, 0.0)
    dominant = shares.max(axis=1)
    J = len(jobs)
    out = []
    for job, d in zip(jobs, dominant):
        d = float(d) if d > 0 else 1.0 / max(1, int(total[rtypes.index("gpu")]))
        replicas = max(1, math.ceil(1.0 / d / J - 1e-9))
        num_nodes = max(1, math.ceil(len(nodes) * d - 1e-9))
        out.append(FairShare(d, replicas, num_nodes, _fair_goodput(job.goodput_model, replicas, num_nodes > 1)))
    return out


@lru_cache(maxsize=8192)
def _fair_goodput(model: GoodputModel, replicas: int, multi: bool) -> float:
    table = optimize_batch_table(model, [replicas], [multi])
    g = float(table.goodput[0])
    if g > 0:
        return g
    # The fair shape can be infeasible (e.g. too many replicas for max_batch);
    # fall back to the best feasible smaller shape.
    ks = np.arange(1, replicas + 1)
    table = optimize_batch_table(model, ks, np.full(len(ks), multi))
    g = float(table.goodput.max())
    if g <= 0:
        table = optimize_batch_table(model, [1], [False])
        g = float(table.goodput[0])
    return g


@lru_cache(maxsize=8192)
def _goodput_grid(model: GoodputModel, max_replicas: int) -> np.ndarray:
    ks = np.arange(max_replicas + 1).repeat(2)
    multi = np.tile([False, True], max_replicas + 1)
    grid = optimize_batch_table(model, ks, multi).goodput.reshape(-1, 2).copy()
    grid[0] = 0.0
    grid.flags.writeable = False
    return grid


class SpeedupTable:
    """Optimized goodput for every (replicas, multi-node) shape up to a cap."""

    def __init__(self, model: GoodputModel, max_replicas: int, base_goodput: float = 1.0):
        self.max_replicas = max(0, int(max_replicas))
        self.goodput = _goodput_grid(model, self.max_replicas)
        self.base_goodput = base_goodput

    def lookup(self, replicas: np.ndarray, multi: np.ndarray) -> np.ndarray:
        replicas = np.asarray(replicas)
        over = replicas > self.max_replicas
        vals = self.goodput[np.minimum(replicas, self.max_replicas), np.asarray(multi, dtype=np.int64)]
        return np.where(over, 0.0, vals) / self.base_goodput


def speedup(job: SchedJobInfo, a: AllocLike, share: FairShare) -> float:
    a = AllocationVector.coerce(a)
    if a.num_gpus == 0:
        return 0.0
    table = optimize_batch_table(job.goodput_model, [a.num_gpus], [a.num_nodes > 1])
    return float(table.goodput[0]) / share.goodput


def realloc_factor(job: SchedJobInfo, delay: float) -> float:
    if delay < 0:
        raise AllocationError("delay must be non-negative")
    denom = job.age + delay
    if denom <= 0:
        return 1.0
    return max(job.age - job.num_restarts * delay, 0.0) / denom


def power_mean(speedups: np.ndarray, p: float) -> np.ndarray:
    """Power mean over the last axis, with the small offset that keeps zero
    speedups finite for p <= 0. The offset is removed again afterwards so that
    equal speedups map to themselves; the ranking is unaffected."""
    speedups = np.asarray(speedups, dtype=float)
    J = speedups.shape[-1]
    if p == 0:
        return np.exp(np.sum(np.log(np.maximum(speedups, SPEEDUP_OFFSET)), axis=-1) / J)
    mean = (np.sum((speedups + SPEEDUP_OFFSET) ** p, axis=-1) / J) ** (1.0 / p)
    return mean - SPEEDUP_OFFSET


def penalized_speedups(speedups: np.ndarray, states: np.ndarray, base: np.ndarray, factors: np.ndarray) -> np.ndarray:
    restart = np.any(states != base, axis=-1)
    return speedups * np.where(restart, factors, 1.0)


def fitness_from_speedups(speedups: Sequence[float], p: float) -> float:
    return float(power_mean(np.asarray(speedups, dtype=float), p))


def fitness(
    jobs: Sequence[SchedJobInfo],
    A: np.ndarray,
    cfg: FitnessConfig,
    nodes: Optional[Sequence[NodeSpec]] = None,
    shares: Optional[Sequence[FairShare]] = None,
) -> float:
    A = np.asarray(A, dtype=np.int64)
    if shares is None:
        if nodes is None:
            raise AllocationError("need nodes or precomputed fair shares")
        shares = fair_share(jobs, nodes)
    base = current_matrix(jobs, A.shape[1])
    vals = np.array([speedup(job, A[j], shares[j]) for j, job in enumerate(jobs)])
    factors = np.array([realloc_factor(job, cfg.realloc_delay) for job in jobs])
    vals = penalized_speedups(vals, A, base, factors)
    return fitness_from_speedups(vals, cfg.p)


def utilities_from_scaling(
    scaling: np.ndarray, states: np.ndarray, job_res: np.ndarray, node_res: np.ndarray
) -> np.ndarray:
    """Cluster utility of (P, J, N) states given per-job fraction-of-ideal scaling."""
    num_replicas = states.sum(axis=-1)
    mask = states.sum(axis=-2) > 0
    total = np.sum(mask[..., None] * node_res, axis=-2)
    alloc = num_replicas[..., None] * job_res
    with np.errstate(divide="ignore", invalid="ignore"):
        shares = np.where(alloc > 0, alloc / total[..., None, :], 0.0)
    util = np.sum(scaling[..., None] * shares, axis=-2)
    return util.max(axis=-1)


def cluster_utility(jobs: Sequence[SchedJobInfo], A: np.ndarray, nodes: Sequence[NodeSpec]) -> float:
    """Resource-weighted average of each job's fraction of ideal linear scaling.

    A job's scaling is its optimized goodput divided by replicas times its
    single-replica goodput; the result is taken on the most utilized resource.
    """
    A = np.asarray(A, dtype=np.int64)
    if not jobs or A.sum() == 0:
        return 0.0
    _, job_res, node_res = resource_arrays(jobs, nodes)
    scaling = np.zeros(len(jobs))
    for j, job in enumerate(jobs):
        a = AllocationVector.coerce(A[j])
        if a.num_gpus == 0:
            continue
        t = optimize_batch_table(job.goodput_model, [1, a.num_gpus], [False, a.num_nodes > 1])
        if t.goodput[0] > 0:
            scaling[j] = t.goodput[1] / (a.num_gpus * t.goodput[0])
    return float(utilities_from_scaling(scaling[None], A[None], job_res, node_res)[0])


def validate_allocation(
    jobs: Sequence[SchedJobInfo],
    nodes: Sequence[NodeSpec],
    A: np.ndarray,
    interference_avoidance: bool = False,
    max_nodes_per_job: Optional[int] = None,
) -> None:
    """Raise AllocationError describing every violated invariant."""
    A = np.asarray(A)
    problems = []
    if A.shape != (len(jobs), len(nodes)):
        raise AllocationError(f"allocation shape {A.shape} != {(len(jobs), len(nodes))}")
    if (A < 0).any():
        problems.append("negative entries")
    rtypes, job_res, node_res = resource_arrays(jobs, nodes)
    used = np.einsum("jn,jr->nr", A, job_res)
    for n, r in np.argwhere(used > node_res):
        problems.append(f"node {n} over capacity on {rtypes[r]} ({used[n, r]} > {node_res[n, r]})")
    if interference_avoidance:
        distributed = np.count_nonzero(A, axis=1) > 1
        per_node = np.count_nonzero(A[distributed] > 0, axis=0)
        for n in np.flatnonzero(per_node > 1):
            problems.append(f"node {n} hosts {per_node[n]} distributed jobs")
    for j, job in enumerate(jobs):
        k = int(A[j].sum())
        if job.max_replicas is not None and k > job.max_replicas:
            problems.append(f"job {j} has {k} > max_replicas {job.max_replicas}")
        if 0 < k < job.min_replicas:
            problems.append(f"job {j} has {k} < min_replicas {job.min_replicas}")
        if max_nodes_per_job is not None and np.count_nonzero(A[j]) > max_nodes_per_job:
            problems.append(f"job {j} spans more than {max_nodes_per_job} nodes")
    if problems:
        raise AllocationError("; ".join(problems))


def allocations_to_json(job_ids: Sequence[str], A: np.ndarray) -> str:
    A = np.asarray(A, dtype=np.int64)
    return json.dumps({str(j): A[i].tolist() for i, j in enumerate(job_ids)}, sort_keys=True)


def allocations_from_json(text: str, job_ids: Sequence[str], num_nodes: int) -> np.ndarray:
    data = json.loads(text)
    A = np.zeros((len(job_ids), num_nodes), dtype=np.int64)
    for i, j in enumerate(job_ids):
        row = data.get(str(j))
        if row is not None:
            if len(row) != num_nodes:
                raise AllocationError(f"job {j}: expected {num_nodes} nodes, got {len(row)}")
            A[i] = row
    return A
