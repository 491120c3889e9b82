"""Random small scheduling instances and their brute-force optima."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from goodput_sched.goodput import GoodputModel, ThroughputParams
from goodput_sched.sched.core import FitnessConfig, NodeSpec, SchedJobInfo

from . import oracles


def random_instance(rng: np.random.Generator):
    """At most 3 jobs on at most 2 nodes of at most 2 GPUs, with a random incumbent."""
    N, G, J = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    nodes = [NodeSpec.gpus(G) for _ in range(N)]
    free = np.full(N, G)
    jobs = []
    for _ in range(J):
        p = ThroughputParams(
            rng.uniform(0.01, 0.1),
            rng.uniform(1e-4, 1e-2),
            rng.uniform(0, 0.2),
            rng.uniform(0, 0.05),
            rng.uniform(0, 0.4),
            rng.uniform(0, 0.1),
            rng.uniform(1, 3),
        )
        m0 = int(rng.integers(8, 128))
        model = GoodputModel(p, rng.uniform(0, 5000), m0, max_per_gpu_batch=int(m0 * rng.integers(1, 4)))
        row = np.zeros(N, dtype=np.int64)
        if rng.random() < 0.6:
            n = int(rng.integers(N))
            row[n] = int(rng.integers(0, free[n] + 1))
            free[n] -= row[n]
        jobs.append(
            SchedJobInfo(model, current_allocation=row, age=float(rng.uniform(0, 1000)), num_restarts=int(rng.integers(0, 3)))
        )
    cfg = FitnessConfig(p=float(rng.choice([-1.0, 1.0, -10.0, 0.0])))
    return jobs, nodes, cfg


def brute_force(jobs, nodes, cfg):
    """(best fitness, best matrix, incumbent fitness) by exhaustive enumeration."""
    caps = [n.resources["gpu"] for n in nodes]
    total = sum(caps)
    J = len(jobs)

    @lru_cache(maxsize=None)
    def best(j, k, multi):
        g = jobs[j].goodput_model
        r = oracles.grid_best(g.params.to_dict(), g.pgns, g.init_batch, g.max_batch, g.max_per_gpu_batch, k, multi, g.non_adaptive)
        return 0.0 if r is None else r[0]

    fair_k = math.ceil(total / J - 1e-9)
    fair_multi = math.ceil(len(nodes) / total - 1e-9) > 1
    fair = [best(j, fair_k, fair_multi) for j in range(J)]
    max_rep = [j.max_replicas for j in jobs]
    cands = [A for A in oracles.enumerate_matrices(J, caps) if oracles.feasible(A, max_rep, cfg.interference_avoidance)]
    base = np.array([j.current_allocation for j in jobs])
    args = (fair, base, [j.age for j in jobs], [j.num_restarts for j in jobs], cfg.realloc_delay, cfg.p)
    opt, A = oracles.brute_force_fitness(best, *args[:1], cands, *args[1:])
    inc, _ = oracles.brute_force_fitness(best, fair, [base], *args[1:])
    return opt, A, inc
