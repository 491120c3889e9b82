"""Isolated-partition baselines for finish-time fairness."""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Optional

from ..sched.core import NodeSpec
from ..workload import JobSpec, WorkloadSpec
from .metrics import MetricsReport, finish_time_fairness
from .profiles import ProfileLibrary
from .simulator import SimConfig, run

# (model, mode, gpus, batch, partition, policy, interval, report, delay, tick) -> JCT
_CACHE: dict[tuple, float] = {}


def partition_nodes(gpus: int, per_node: int) -> list[NodeSpec]:
    full, rest = divmod(gpus, per_node)
    return [NodeSpec.gpus(per_node) for _ in range(full)] + ([NodeSpec.gpus(rest)] if rest else [])


def isolated_jct(spec: JobSpec, profiles: ProfileLibrary, cfg: SimConfig, gpus: int) -> float:
    """JCT of the job submitted alone at t=0 to a cluster of ``gpus`` GPUs."""
    fixed = spec.gpus is not None
    gpus_req = min(spec.gpus, gpus) if fixed else None
    key = (spec.model, spec.mode, gpus_req, spec.batch, gpus, cfg.policy, cfg.interval,
           cfg.report_interval, cfg.realloc_delay, cfg.tick)
    hit = _CACHE.get(key)
    if hit is not None:
        return hit
    job = replace(spec, job_id="isolated", submit_time=0.0, gpus=gpus_req)
    solo_cfg = replace(cfg, seed=0, slowdown=0.0)
    report = run(WorkloadSpec((job,), spec.mode, 0), profiles, solo_cfg, partition_nodes(gpus, cfg.gpus_per_node))
    jct = report.records[0].jct_s
    _CACHE[key] = jct
    return jct


def isolated_jcts(
    workload: WorkloadSpec, profiles: ProfileLibrary, cfg: SimConfig, report: MetricsReport, total_gpus: Optional[int] = None
) -> dict[str, float]:
    """Isolated JCT per job on a 1/J share of the cluster.

    J is the time-averaged number of active jobs over the job's lifetime in the
    shared run. Fractional shares interpolate linearly between the whole-GPU
    partitions around them; shares below one GPU scale the one-GPU JCT.
    """
    total = total_gpus or cfg.num_nodes * cfg.gpus_per_node
    specs = {s.job_id: s for s in workload.jobs}
    out = {}
    for rec in report.records:
        spec = specs[rec.job_id]
        share = total / rec.avg_active_jobs
        if share < 1:
            out[rec.job_id] = isolated_jct(spec, profiles, cfg, 1) / share
            continue
        lo, hi = math.floor(share), min(math.ceil(share), total)
        j_lo = isolated_jct(spec, profiles, cfg, lo)
        if hi == lo:
            out[rec.job_id] = j_lo
        else:
            j_hi = isolated_jct(spec, profiles, cfg, hi)
            w = share - lo
            out[rec.job_id] = (1 - w) * j_lo + w * j_hi
    return out


def run_with_fairness(workload: WorkloadSpec, profiles: ProfileLibrary, cfg: SimConfig) -> MetricsReport:
    report = run(workload, profiles, cfg)
    if not report.records:
        return report
    return report.with_rho(finish_time_fairness(report, isolated_jcts(workload, profiles, cfg, report)))
