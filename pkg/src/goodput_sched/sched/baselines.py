"""Baseline policies with user-fixed batch sizes: a two-queue least-attained
service scheduler and a greedy remaining-time scheduler."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from ..goodput import GoodputModel, _t_iter
from .core import NodeSpec, SchedJobInfo, current_matrix

DEFAULT_QUEUE_THRESHOLD = 8 * 3600.0  # GPU-seconds


def _capacity(nodes: Sequence[NodeSpec]) -> np.ndarray:
    return np.array([n.resources.get("gpu", 0) for n in nodes], dtype=np.int64)


def pack(k: int, free: np.ndarray) -> Optional[np.ndarray]:
    """Place k GPUs on as few nodes as possible; None if they do not fit.

    A single node is chosen best-fit (least free capacity that still fits);
    otherwise nodes are filled in decreasing order of free capacity.
    """
    row = np.zeros_like(free)
    if k <= 0:
        return row
    if free.sum() < k:
        return None
    fits = np.flatnonzero(free >= k)
    if len(fits):
        n = fits[np.argmin(free[fits])]
        row[n] = k
        return row
    for n in np.argsort(-free, kind="stable"):
        take = min(k, int(free[n]))
        row[n] = take
        k -= take
        if k == 0:
            break
    return row


def _place(jobs: Sequence[SchedJobInfo], counts: Sequence[int], nodes: Sequence[NodeSpec]) -> np.ndarray:
    """Rows for the given GPU counts, keeping current rows when the count is unchanged."""
    free = _capacity(nodes)
    base = current_matrix(jobs, len(nodes))
    A = np.zeros_like(base)
    keep = [j for j, k in enumerate(counts) if k > 0 and base[j].sum() == k]
    for j in keep:
        if np.all(base[j] <= free):
            A[j] = base[j]
            free -= base[j]
    for j, k in enumerate(counts):
        if k > 0 and A[j].sum() == 0:
            row = pack(k, free)
            if row is not None:
                A[j] = row
                free -= row
    return A


def tiresias_policy(
    jobs: Sequence[SchedJobInfo], nodes: Sequence[NodeSpec], queue_threshold: float = DEFAULT_QUEUE_THRESHOLD
) -> np.ndarray:
    """Two priority queues split on attained GPU-seconds, FIFO inside each queue.

    Jobs run at their requested GPU count; a job that does not fit is skipped
    and lower-priority jobs may backfill behind it.
    """
    if not jobs:
        return np.zeros((0, len(nodes)), dtype=np.int64)
    order = sorted(
        range(len(jobs)),
        key=lambda j: (jobs[j].attained_service >= queue_threshold, jobs[j].submit_time, j),
    )
    remaining = int(_capacity(nodes).sum())
    counts = [0] * len(jobs)
    for j in order:
        k = jobs[j].requested_gpus
        if 0 < k <= remaining:
            counts[j] = k
            remaining -= k
    return _place(jobs, counts, nodes)


def fixed_batch_throughput(model: GoodputModel, total_batch: int, ks: np.ndarray, gpus_per_node: int) -> np.ndarray:
    """Predicted examples/s at a fixed total batch for each GPU count, assuming
    packed placement onto ceil(k / gpus_per_node) nodes. Zero where infeasible."""
    ks = np.asarray(ks, dtype=np.int64)
    ok = (ks >= 1) & (ks <= total_batch)
    k = np.maximum(ks, 1)
    # Smallest accumulation count whose per-GPU share fits in memory.
    s = np.maximum(0, -(-total_batch // (k * model.max_per_gpu_batch)) - 1)
    m = np.maximum(1, -(-total_batch // (k * (s + 1))))
    multi = k > max(gpus_per_node, 1)
    t = _t_iter(model.params, k, multi, m, s)
    return np.where(ok, k * m * (s + 1) / t, 0.0)


def optimus_policy(jobs: Sequence[SchedJobInfo], nodes: Sequence[NodeSpec]) -> np.ndarray:
    """Greedy allocation by predicted reduction in remaining time.

    Every job first gets one GPU (shortest remaining time first); each further
    GPU goes to the job whose remaining time drops the most, until GPUs run
    out or no job gains.
    """
    J = len(jobs)
    if J == 0:
        return np.zeros((0, len(nodes)), dtype=np.int64)
    cap = _capacity(nodes)
    total = int(cap.sum())
    per_node = int(cap.max()) if len(cap) else 0
    ks = np.arange(total + 1)
    remaining_time = []
    for job in jobs:
        batch = job.fixed_batch or job.goodput_model.init_batch
        limit = total if job.max_replicas is None else min(total, job.max_replicas)
        thr = fixed_batch_throughput(job.goodput_model, batch, ks, per_node)
        thr[limit + 1 :] = 0.0
        work = job.remaining_examples if math.isfinite(job.remaining_examples) else 1.0
        remaining_time.append(np.where(thr > 0, work / np.where(thr > 0, thr, 1.0), np.inf))
    counts = [0] * J
    free = total
    for j in sorted(range(J), key=lambda j: (remaining_time[j][1], j)):
        if free > 0 and np.isfinite(remaining_time[j][1]):
            counts[j] = 1
            free -= 1
    while free > 0:
        gains = [
            remaining_time[j][counts[j]] - remaining_time[j][counts[j] + 1]
            if 0 < counts[j] < total and np.isfinite(remaining_time[j][counts[j] + 1])
            else 0.0
            for j in range(J)
        ]
        best = int(np.argmax(gains))
        if not gains[best] > 0:
            break
        counts[best] += 1
        free -= 1
    return _place(jobs, counts, nodes)
