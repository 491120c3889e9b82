"""Trace-driven cluster simulator.

Time advances in 1 s ticks, but since nothing changes between agent reports
and scheduling rounds, the loop jumps from one such boundary to the next and
integrates progress in closed form, carrying fractional iterations. Job
completions are resolved to the tick in which they happen.
"""

from __future__ import annotations

import logging
import math
import time as wallclock
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..fitting import NUM_STARTS, ExplorationState, ProfilePoint, allocation_cap, fit_throughput, prior_params
from ..goodput import (
    AllocationVector,
    BatchConfig,
    GoodputModel,
    ThroughputParams,
    fixed_batch_config,
    optimize_batch_table,
)
from ..sched.baselines import DEFAULT_QUEUE_THRESHOLD, optimus_policy, tiresias_policy
from ..sched.core import FitnessConfig, NodeSpec, SchedJobInfo, validate_allocation
from ..sched.search import GENERATIONS, PATIENCE, POP_SIZE, PolluxSearch
from ..workload import JobSpec, WorkloadSpec
from . import oracle
from .metrics import MetricsReport
from .profiles import ModelProfile, ProfileLibrary

log = logging.getLogger(__name__)

POLICIES = ("pollux", "tiresias", "optimus")
PHI_DRIFT = 0.02  # relative change in the noise scale before it is re-reported
WARM_STARTS = 2


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    policy: str = "pollux"
    p: float = -1.0
    tick: float = 1.0
    interval: float = 60.0
    report_interval: float = 30.0
    realloc_delay: float = 30.0
    slowdown: float = 0.0
    interference_avoidance: bool = True
    seed: int = 0
    num_nodes: int = 16
    gpus_per_node: int = 4
    queue_threshold: float = DEFAULT_QUEUE_THRESHOLD
    population: int = POP_SIZE
    generations: int = GENERATIONS
    patience: Optional[int] = PATIENCE
    max_wall_seconds: float = 3600.0
    max_sim_seconds: float = 30 * 86400.0

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise SimulationError(f"unknown policy {self.policy!r}")
        if not 0 <= self.slowdown < 1:
            raise SimulationError("slowdown must be in [0, 1)")
        for name in ("interval", "report_interval"):
            v = getattr(self, name)
            if v <= 0 or abs(v / self.tick - round(v / self.tick)) > 1e-9:
                raise SimulationError(f"{name} must be a positive multiple of the tick")
        if self.realloc_delay < 0:
            raise SimulationError("realloc delay must be non-negative")


@dataclass
class JobState:
    spec: JobSpec
    profile: ModelProfile
    allocation: np.ndarray
    batch: Optional[BatchConfig] = None
    progress: float = 0.0
    restarts: int = 0
    delay: float = 0.0
    started: bool = False
    start_time: Optional[float] = None
    completion_time: Optional[float] = None
    attained_service: float = 0.0
    examples: float = 0.0
    useful_examples: float = 0.0
    # Agent-side view of the job.
    points: dict = field(default_factory=dict)
    explored: ExplorationState = field(default_factory=ExplorationState)
    params: ThroughputParams = field(default_factory=prior_params)
    phi: float = 0.0
    fitted_shapes: int = 0
    fitted_points: int = 0
    observed_t_iter: Optional[float] = None

    @property
    def job_id(self) -> str:
        return self.spec.job_id

    @property
    def done(self) -> bool:
        return self.completion_time is not None

    @property
    def running(self) -> bool:
        return self.allocation.sum() > 0 and self.batch is not None

    def goodput_model(self, params: Optional[ThroughputParams] = None, phi: Optional[float] = None) -> GoodputModel:
        prof = self.profile
        return GoodputModel(
            self.params if params is None else params,
            self.phi if phi is None else phi,
            prof.m0,
            prof.max_batch,
            prof.max_per_gpu_batch,
            non_adaptive=self.spec.mode != "pollux",
        )


@dataclass
class World:
    time: float
    jobs: list[JobState]
    nodes: list[NodeSpec]
    cfg: SimConfig
    timeline: list[tuple] = field(default_factory=list)

    @property
    def active(self) -> list[JobState]:
        return [j for j in self.jobs if j.spec.submit_time <= self.time and not j.done]


# --- per-job mechanics -----------------------------------------------------------


def total_batch(job: JobState) -> int:
    a = AllocationVector.coerce(job.allocation)
    return a.num_gpus * job.batch.per_gpu_batch * (job.batch.accum_steps + 1)


def interference_factors(world: World) -> dict[str, float]:
    """Iteration-time multiplier for distributed jobs sharing a node with another one."""
    if world.cfg.slowdown <= 0:
        return {}
    running = [j for j in world.jobs if not j.done and j.allocation.sum() > 0]
    distributed = [j for j in running if np.count_nonzero(j.allocation) > 1]
    if len(distributed) < 2:
        return {}
    occupancy = np.sum([j.allocation > 0 for j in distributed], axis=0)
    factor = 1.0 / (1.0 - world.cfg.slowdown)
    return {j.job_id: factor for j in distributed if np.any(occupancy[j.allocation > 0] > 1)}


def true_t_iter(job: JobState, slow: float = 1.0) -> float:
    return job.profile.t_iter(job.allocation, job.batch) * slow


def true_efficiency(job: JobState, M: int) -> float:
    prof = job.profile
    if M <= prof.m0:
        return 1.0
    phi = prof.phi(job.progress, M)
    return (phi + prof.m0) / (phi + M)


def step(world: World, dt: float) -> World:
    """Advance every running job by dt seconds (a whole number of ticks)."""
    cfg = world.cfg
    t0 = world.time
    slow = interference_factors(world)
    gpus_busy = 0
    eff_sum = 0.0
    for job in world.jobs:
        if job.done or job.spec.submit_time > t0:
            continue
        k = int(job.allocation.sum())
        if k == 0 or job.batch is None:
            continue
        gpus_busy += k
        job.attained_service += k * dt
        wait = min(job.delay, dt)
        job.delay -= wait
        run = dt - wait
        M = total_batch(job)
        eff = true_efficiency(job, M)
        eff_sum += eff * k
        if run <= 0:
            continue
        t_iter = true_t_iter(job, slow.get(job.job_id, 1.0))
        job.observed_t_iter = t_iter
        rate = eff * M / (job.profile.dataset_size * t_iter)  # epochs per second
        need = job.profile.target_epochs - job.progress
        if rate * run >= need * (1 - 1e-12):  # tolerate rounding in accumulated progress
            used = need / rate
            done_at = t0 + wait + used
            # Completion is observed at the end of the tick in which it happens.
            job.completion_time = t0 + math.ceil((done_at - t0) / cfg.tick - 1e-9) * cfg.tick
            job.progress = job.profile.target_epochs
            job.examples += used / t_iter * M
            job.useful_examples += used / t_iter * M * eff
        else:
            job.progress += rate * run
            job.examples += run / t_iter * M
            job.useful_examples += run / t_iter * M * eff
    world.timeline.append((t0, len(world.active), gpus_busy, eff_sum / gpus_busy if gpus_busy else 1.0))
    world.time = t0 + dt
    return world


def apply_allocations(world: World, jobs: Sequence[JobState], A: np.ndarray) -> World:
    """Install a new allocation matrix for the given jobs.

    Changed rows that remain non-empty after a job's first start incur the
    restart delay and count as a restart; emptied rows leave the job pending
    with its progress intact.
    """
    A = np.asarray(A, dtype=np.int64)
    rows = {j.job_id: A[i] for i, j in enumerate(jobs)}
    full = [rows.get(j.job_id, j.allocation) if not j.done else np.zeros_like(j.allocation) for j in world.jobs]
    used = np.sum(full, axis=0) if full else np.zeros(len(world.nodes), dtype=np.int64)
    cap = np.array([n.resources["gpu"] for n in world.nodes])
    if np.any(used > cap):
        raise SimulationError("allocation exceeds node capacity")
    for job, row in zip(jobs, A):
        if np.array_equal(row, job.allocation):
            continue
        job.allocation = row.copy()
        job.observed_t_iter = None
        if row.sum() == 0:
            job.batch = None
            job.delay = 0.0
            continue
        if job.started:
            job.restarts += 1
            job.delay = world.cfg.realloc_delay
        else:
            job.started = True
            job.start_time = world.time
        job.batch = None  # chosen by the caller for the new shape
    return world


# --- policies ------------------------------------------------------------------


class _Policy:
    def __init__(self, cfg: SimConfig, nodes: list[NodeSpec]):
        self.cfg = cfg
        self.nodes = nodes

    def allocate(self, world: World, jobs: list[JobState]) -> np.ndarray:
        raise NotImplementedError

    def batch_for(self, job: JobState) -> Optional[BatchConfig]:
        k = int(job.allocation.sum())
        return fixed_batch_config(job.spec.batch, k, job.profile.max_per_gpu_batch)


class PolluxPolicy(_Policy):
    def __init__(self, cfg: SimConfig, nodes: list[NodeSpec]):
        super().__init__(cfg, nodes)
        fit_cfg = FitnessConfig(p=cfg.p, realloc_delay=cfg.realloc_delay, interference_avoidance=cfg.interference_avoidance)
        self.search = PolluxSearch(fit_cfg, cfg.seed, cfg.population, cfg.generations, cfg.patience)

    def allocate(self, world: World, jobs: list[JobState]) -> np.ndarray:
        infos = [
            SchedJobInfo(
                j.goodput_model(),
                current_allocation=j.allocation,
                age=world.time - j.spec.submit_time,
                num_restarts=j.restarts,
                max_replicas=allocation_cap(j.explored),
                job_id=j.job_id,
            )
            for j in jobs
        ]
        result = self.search(infos, self.nodes, [j.job_id for j in jobs])
        return result.allocation

    def batch_for(self, job: JobState) -> Optional[BatchConfig]:
        a = AllocationVector.coerce(job.allocation)
        return _best_batch(job.goodput_model(), a.num_gpus, a.num_nodes > 1)


@lru_cache(maxsize=4096)
def _best_batch(model: GoodputModel, num_gpus: int, multi_node: bool) -> Optional[BatchConfig]:
    table = optimize_batch_table(model, [num_gpus], [multi_node])
    if num_gpus < 1 or table.per_gpu_batch[0] < 1:
        return None
    return BatchConfig(int(table.per_gpu_batch[0]), int(table.accum_steps[0]))


class TiresiasPolicy(_Policy):
    def allocate(self, world: World, jobs: list[JobState]) -> np.ndarray:
        infos = [
            SchedJobInfo(
                j.goodput_model(),
                current_allocation=j.allocation,
                job_id=j.job_id,
                submit_time=j.spec.submit_time,
                requested_gpus=j.spec.gpus,
                attained_service=j.attained_service,
            )
            for j in jobs
        ]
        return tiresias_policy(infos, self.nodes, self.cfg.queue_threshold)


class OptimusPolicy(_Policy):
    """Greedy GPU counts with the throughput model fitted offline to the full
    profile and the exact remaining work known in advance."""

    def allocate(self, world: World, jobs: list[JobState]) -> np.ndarray:
        infos = []
        for j in jobs:
            prof = j.profile
            M = j.spec.batch
            remaining = prof.dataset_size * oracle.epoch_cost(prof, M, j.progress)
            infos.append(
                SchedJobInfo(
                    j.goodput_model(params=oracle.profile_params(prof)),
                    current_allocation=j.allocation,
                    max_replicas=M,
                    job_id=j.job_id,
                    fixed_batch=M,
                    remaining_examples=remaining,
                )
            )
        return optimus_policy(infos, self.nodes)


def make_policy(cfg: SimConfig, nodes: list[NodeSpec]) -> _Policy:
    return {"pollux": PolluxPolicy, "tiresias": TiresiasPolicy, "optimus": OptimusPolicy}[cfg.policy](cfg, nodes)


# --- agent -------------------------------------------------------------------------


def agent_report(job: JobState, policy: _Policy) -> None:
    """Record the last observed iteration, refresh the noise scale and refit.

    Refits happen when a new (GPUs, multi-node) shape was observed or the
    number of distinct profile points grew by half since the last fit.
    """
    if not job.running or job.observed_t_iter is None:
        return
    a = AllocationVector.coerce(job.allocation)
    point = ProfilePoint(a, job.batch, job.observed_t_iter)
    job.points[point.key] = point
    job.explored = job.explored.observe(a)
    phi = job.profile.phi(job.progress, total_batch(job))
    # Small drifts are not re-reported, so the scheduler's goodput tables stay cached.
    if abs(phi - job.phi) > PHI_DRIFT * max(job.phi, 1e-12):
        job.phi = phi
    if job.spec.mode != "pollux":
        return
    shapes = len({k[:2] for k in job.points})
    if shapes > job.fitted_shapes or len(job.points) >= 1.5 * job.fitted_points:
        # A warm start from the previous fit needs only one extra random restart.
        starts = WARM_STARTS if job.fitted_points else NUM_STARTS
        job.params = fit_throughput(list(job.points.values()), job.explored, job.params, num_starts=starts)
        job.fitted_shapes = shapes
        job.fitted_points = len(job.points)
    cfg = policy.batch_for(job)
    if cfg is not None:
        job.batch = cfg


# --- driver --------------------------------------------------------------------------


def _next_multiple(t: float, period: float) -> float:
    return (math.floor(t / period + 1e-9) + 1) * period


def cluster_nodes(cfg: SimConfig) -> list[NodeSpec]:
    return [NodeSpec.gpus(cfg.gpus_per_node) for _ in range(cfg.num_nodes)]


def run(
    workload: WorkloadSpec,
    profiles: ProfileLibrary,
    cfg: SimConfig = SimConfig(),
    nodes: Optional[Sequence[NodeSpec]] = None,
) -> MetricsReport:
    """Simulate the workload to completion and return per-job metrics.

    ``nodes`` overrides the homogeneous cluster described by ``cfg``.
    """
    nodes = list(nodes) if nodes is not None else cluster_nodes(cfg)
    jobs = [
        JobState(spec, profiles.get_model(spec.model), np.zeros(len(nodes), dtype=np.int64))
        for spec in sorted(workload.jobs, key=lambda s: (s.submit_time, s.job_id))
    ]
    for j in jobs:
        if j.spec.mode != "pollux" and cfg.policy == "pollux":
            raise SimulationError("the pollux policy expects a pollux-mode workload")
        if j.spec.mode == "pollux" and cfg.policy != "pollux":
            raise SimulationError(f"the {cfg.policy} policy expects fixed job configurations")
    world = World(0.0, jobs, nodes, cfg)
    policy = make_policy(cfg, nodes)
    started = wallclock.monotonic()
    next_round = 0.0
    next_report = cfg.report_interval
    while any(not j.done for j in jobs):
        if wallclock.monotonic() - started > cfg.max_wall_seconds:
            raise SimulationError(f"wall-clock limit of {cfg.max_wall_seconds:.0f}s exceeded at t={world.time:.0f}s")
        if world.time > cfg.max_sim_seconds:
            raise SimulationError(f"simulated time exceeded {cfg.max_sim_seconds:.0f}s")
        if world.time >= next_report - 1e-9:
            for job in world.active:
                agent_report(job, policy)
            next_report = _next_multiple(world.time, cfg.report_interval)
        if world.time >= next_round - 1e-9:
            schedule(world, policy)
            next_round = _next_multiple(world.time, cfg.interval)
        horizon = min(next_round, next_report)
        pending = [j.spec.submit_time for j in jobs if j.spec.submit_time > world.time]
        if not world.active and pending:
            # Idle cluster: jump to the first round after the next arrival.
            horizon = max(horizon, math.ceil(min(pending) / cfg.interval - 1e-9) * cfg.interval)
            next_round = horizon
            next_report = _next_multiple(horizon - 1e-9, cfg.report_interval)
            world.time = horizon
            continue
        step(world, horizon - world.time)
        for job in world.jobs:
            if job.done and job.allocation.sum() > 0:
                job.allocation = np.zeros_like(job.allocation)
                job.batch = None
    return MetricsReport.from_world(world)


def schedule(world: World, policy: _Policy) -> None:
    jobs = world.active
    if not jobs:
        return
    A = policy.allocate(world, jobs)
    infos = [SchedJobInfo(j.goodput_model(), job_id=j.job_id) for j in jobs]
    validate_allocation(
        infos,
        world.nodes,
        A,
        interference_avoidance=world.cfg.interference_avoidance and world.cfg.policy == "pollux",
    )
    before = {j.job_id: (j.allocation.copy(), j.started, j.start_time, j.restarts) for j in jobs}
    apply_allocations(world, jobs, A)
    for job in jobs:
        if job.allocation.sum() == 0 or job.batch is not None:
            continue
        cfg = policy.batch_for(job)
        if cfg is None:
            # No feasible batch for this shape; the job stays where it was.
            log.debug("%s: no feasible batch on %s", job.job_id, job.allocation.tolist())
            job.allocation, job.started, job.start_time, job.restarts = before[job.job_id]
            job.delay = 0.0
            job.batch = policy.batch_for(job) if job.allocation.sum() else None
            continue
        job.batch = cfg
