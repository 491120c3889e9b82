"""Offline completion-time estimates from a profile, for configuring jobs.

These integrate the replayed iteration times and noise scale over training
for a fixed placement, which is what a careful user would do when tuning a
job by hand.
"""

from __future__ import annotations

import math
import numpy as np

from ..fitting import ProfilePoint, fit_throughput
from ..goodput import BatchConfig, GoodputModel, ThroughputParams, fixed_batch_config
from .profiles import ModelProfile

EPOCH_STEPS = 50
GPUS_PER_NODE = 4


def packed(gpus: int, per_node: int = GPUS_PER_NODE) -> list[int]:
    """GPUs spread over the fewest nodes, filling nodes in order."""
    full, rest = divmod(gpus, per_node)
    return [per_node] * full + ([rest] if rest else [])


def spread(gpus: int, nodes: int) -> list[int]:
    """GPUs split as evenly as possible over the given number of nodes."""
    return [gpus // nodes + (1 if i < gpus % nodes else 0) for i in range(nodes)]


_PARAMS: dict[int, tuple[ModelProfile, ThroughputParams]] = {}


def profile_params(profile: ModelProfile) -> ThroughputParams:
    """Throughput parameters fitted to every row of a profile (cached per profile)."""
    hit = _PARAMS.get(id(profile))
    if hit is not None and hit[0] is profile:
        return hit[1]
    points = [
        ProfilePoint(
            spread(r["gpus"], r["nodes"]),
            BatchConfig(r["per_gpu_batch"], r["accum_steps"]),
            r["t_iter_seconds"],
        )
        for r in profile.throughput
    ]
    params = fit_throughput(points)
    _PARAMS[id(profile)] = (profile, params)
    return params


def profile_model(profile: ModelProfile, pgns: float = 0.0) -> GoodputModel:
    return GoodputModel(
        profile_params(profile), pgns, profile.m0, profile.max_batch, profile.max_per_gpu_batch
    )


def fixed_batch_jct(profile: ModelProfile, gpus: int, total_batch: int) -> float:
    """Seconds to reach the target epochs on packed GPUs at a fixed total batch."""
    if gpus < 1 or total_batch < gpus:
        return math.inf
    cfg = fixed_batch_config(total_batch, gpus, profile.max_per_gpu_batch)
    realized = gpus * cfg.per_gpu_batch * (cfg.accum_steps + 1)
    t = profile.t_iter(packed(gpus), cfg)
    return profile.dataset_size * t * epoch_cost(profile, realized, 0.0) / realized


def epoch_cost(profile: ModelProfile, total_batch: float, start: float) -> float:
    """Integral of 1/efficiency over the remaining epochs, from ``start`` to the target."""
    if start >= profile.target_epochs:
        return 0.0
    edges = np.linspace(start, profile.target_epochs, EPOCH_STEPS + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    phi = profile.phi_curve(mids, total_batch)
    if total_batch > profile.m0:
        inv_eff = (phi + total_batch) / (phi + profile.m0)
    else:
        inv_eff = np.ones_like(phi)
    return float(np.sum(np.diff(edges) * inv_eff))


def batch_candidates(profile: ModelProfile, gpus: int, num: int = 16) -> list[int]:
    hi = min(profile.max_batch, gpus * profile.max_per_gpu_batch * 16)
    lo = max(profile.m0, gpus)
    if hi < lo:
        return []
    return sorted(set(np.round(np.geomspace(lo, hi, num)).astype(int).tolist()))


def best_fixed_batch(profile: ModelProfile, gpus: int) -> tuple[int, float]:
    """(total batch, JCT seconds) minimizing completion time for a fixed GPU count."""
    best = (0, math.inf)
    for b in batch_candidates(profile, gpus):
        jct = fixed_batch_jct(profile, gpus, b)
        if jct < best[1]:
            best = (b, jct)
    return best


_TUNED: dict[int, tuple[ModelProfile, dict]] = {}


def scaling_table(profile: ModelProfile, max_gpus: int = 64) -> dict[int, tuple[int, float, float]]:
    """{gpus: (best batch, JCT seconds, fraction of ideal scaling)} (cached per profile)."""
    hit = _TUNED.get(id(profile))
    if hit is not None and hit[0] is profile and max(hit[1]) >= max_gpus:
        return {k: v for k, v in hit[1].items() if k <= max_gpus}
    t1 = best_fixed_batch(profile, 1)[1]
    table = {}
    for k in range(1, max_gpus + 1):
        b, jct = best_fixed_batch(profile, k)
        table[k] = (b, jct, t1 / (k * jct) if math.isfinite(jct) else 0.0)
    _TUNED[id(profile)] = (profile, table)
    return table


def gpu_hours(profile: ModelProfile) -> float:
    """GPU-hours to train on one GPU with its best fixed batch size."""
    return best_fixed_batch(profile, 1)[1] / 3600.0


def scaling_efficiency(profile: ModelProfile, gpus: int) -> float:
    """Fraction of ideal linear speedup over one GPU, each at its best batch size."""
    t1 = best_fixed_batch(profile, 1)[1]
    tk = best_fixed_batch(profile, gpus)[1]
    return t1 / (gpus * tk) if math.isfinite(tk) else 0.0
