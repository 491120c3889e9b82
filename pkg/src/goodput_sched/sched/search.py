"""Population-based search over allocation matrices.

States are integer arrays of shape (pop, jobs, nodes). Offspring come from a
single-point crossover over the job axis and a three-part mutation (reset a
job to its current row, zero out entries, grow into free capacity); every
candidate is then repaired into a feasible matrix before evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Optional, Sequence

import numpy as np

from .core import (
    FitnessConfig,
    NodeSpec,
    SchedJobInfo,
    SpeedupTable,
    current_matrix,
    fair_share,
    penalized_speedups,
    power_mean,
    realloc_factor,
    resource_arrays,
    utilities_from_scaling,
)

POP_SIZE = 100
GENERATIONS = 50
PATIENCE = 10


@dataclass
class SearchResult:
    allocation: np.ndarray
    fitness: float
    utility: float
    population: np.ndarray
    fitnesses: np.ndarray
    utilities: np.ndarray


class AllocationProblem:
    def __init__(self, jobs: Sequence[SchedJobInfo], nodes: Sequence[NodeSpec], cfg: FitnessConfig):
        self.jobs = list(jobs)
        self.nodes = list(nodes)
        self.cfg = cfg
        N = len(nodes)
        self.base = current_matrix(jobs, N)
        rtypes, self.job_res, self.node_res = resource_arrays(jobs, nodes)
        self.gpu_index = rtypes.index("gpu")
        # Largest number of replicas of each job that fit on each node by itself.
        with np.errstate(divide="ignore"):
            ratio = np.where(
                self.job_res[:, None, :] > 0,
                self.node_res[None, :, :] // np.maximum(self.job_res[:, None, :], 1),
                np.iinfo(np.int64).max,
            )
        self.node_max = ratio.min(axis=-1).astype(np.int64)
        self.node_max = np.maximum(self.node_max, self.base)
        cluster_max = self.node_max.sum(axis=1)
        self.max_replicas = np.array(
            [cluster_max[j] if job.max_replicas is None else min(job.max_replicas, cluster_max[j]) for j, job in enumerate(jobs)],
            dtype=np.int64,
        )
        self.max_replicas = np.maximum(self.max_replicas, np.where([j.pinned for j in jobs], self.base.sum(axis=1), 0))
        self.min_replicas = np.array([job.min_replicas for job in jobs], dtype=np.int64)
        self.pinned = np.array([job.pinned for job in jobs], dtype=bool)
        shares = fair_share(jobs, nodes)
        self.tables = []
        self.scaling_tables = []
        for job, share, cap in zip(jobs, shares, self.max_replicas):
            t = SpeedupTable(job.goodput_model, cap, share.goodput)
            self.tables.append(t)
            single = t.goodput[1, 0] if cap >= 1 else 0.0
            self.scaling_tables.append(single)
        self.factors = np.array([realloc_factor(job, cfg.realloc_delay) for job in jobs])

    # -- evaluation ---------------------------------------------------------

    def speedups(self, states: np.ndarray) -> np.ndarray:
        replicas = states.sum(axis=-1)
        multi = np.count_nonzero(states, axis=-1) > 1
        out = np.empty(replicas.shape, dtype=float)
        for j, table in enumerate(self.tables):
            out[..., j] = table.lookup(replicas[..., j], multi[..., j])
        return out

    def evaluate(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        sp = self.speedups(states)
        fit = power_mean(penalized_speedups(sp, states, self.base, self.factors), self.cfg.p)
        return fit, self.utilities(states, sp)

    def utilities(self, states: np.ndarray, sp: Optional[np.ndarray] = None) -> np.ndarray:
        if sp is None:
            sp = self.speedups(states)
        replicas = states.sum(axis=-1)
        fair = np.array([t.base_goodput for t in self.tables])
        single = np.array(self.scaling_tables)
        with np.errstate(divide="ignore", invalid="ignore"):
            scaling = np.where((replicas > 0) & (single > 0), sp * fair / (replicas * np.where(single > 0, single, 1.0)), 0.0)
        return utilities_from_scaling(scaling, states, self.job_res, self.node_res)

    def equal_share(self) -> np.ndarray:
        """Give every job an equal GPU count, each packed onto as few nodes as possible."""
        J, N = self.base.shape
        g = self.gpu_index
        gpu = self.job_res[:, g]
        k = max(1, int(self.node_res[:, g].sum()) // max(J, 1))
        free = self.node_res[:, g].astype(np.int64).copy()
        out = np.zeros_like(self.base)
        for j in range(J):
            want = min(k, int(self.max_replicas[j])) * max(int(gpu[j]), 1)
            for n in np.argsort(-free, kind="stable"):
                take = min(want, free[n]) // max(int(gpu[j]), 1)
                out[j, n] = take
                free[n] -= take * max(int(gpu[j]), 1)
                want -= take * max(int(gpu[j]), 1)
                if want <= 0:
                    break
        return out

    # -- operators ------------------------------------------------------------

    def crossover(self, parents: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """parents: (2, matings, J, N) -> offspring of the same shape."""
        _, matings, J, _ = parents.shape
        points = rng.integers(J, size=(matings, 1))
        mask = (np.arange(J) < points)[:, :, None]
        a, b = parents
        return np.stack([np.where(mask, b, a), np.where(mask, a, b)])

    def mutate(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        P, J, N = states.shape
        # (1) Reset whole jobs back to their current allocation.
        reset = rng.random((P, J)) < 0.1
        states = np.where(reset[..., None], self.base, states)
        # (2) Zero out entries of a few jobs.
        prob = np.where(rng.random((P, J)) < 0.1, 0.1, 0.0)
        states = np.where(rng.random(states.shape) < prob[..., None], 0, states)
        # (3) Grow jobs into nodes with room for another replica.
        used = np.einsum("pjn,jr->pnr", states, self.job_res)
        free = self.node_res[None] - used
        fits = np.all(self.job_res[None, :, None, :] <= free[:, None, :, :], axis=-1)
        p1 = fits / np.maximum(fits.sum(axis=-1, keepdims=True), 1.0)
        present = (states > 0) & fits
        p2 = present / np.maximum(present.sum(axis=-1, keepdims=True), 1.0)
        grow = rng.random(states.shape) < p1 + p2 - p1 * p2
        low = np.minimum(states, self.node_max)
        draw = low + (rng.random(states.shape) * (self.node_max + 1 - low)).astype(np.int64)
        return np.where(grow, draw, states)

    def repair(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        P, J, N = states.shape
        states = states.copy()
        states[:, self.pinned] = self.base[self.pinned]
        # Each candidate claims resources in its own random job order, with
        # pinned jobs always first, so no job is systematically starved.
        priority = rng.random((P, J)) + np.where(self.pinned, -1.0, 0.0)
        order = np.argsort(priority, axis=1)
        inverse = np.argsort(order, axis=1)
        states = np.take_along_axis(states, order[..., None], axis=1)
        if self.cfg.interference_avoidance:
            # At most one distributed job per node; earlier jobs win.
            distributed = np.count_nonzero(states, axis=-1) > 1
            mask = (states * distributed[..., None]) > 0
            states[np.cumsum(mask, axis=1) > 1] = 0
        # Trim rows over the replica or node-count cap, dropping from random nodes.
        max_rep = self.max_replicas[order]
        over = (states.sum(axis=-1) > max_rep) | (np.count_nonzero(states, axis=-1) > self.cfg.max_nodes_per_job)
        if over.any():
            rows = states[over]
            shuffle = np.argsort(rng.random(rows.shape), axis=-1)
            rows = np.take_along_axis(rows, shuffle, axis=-1)
            rows = np.diff(np.minimum(np.cumsum(rows, axis=-1), max_rep[over][:, None]), axis=-1, prepend=0)
            keep = np.diff(np.minimum(np.cumsum(rows > 0, axis=-1), self.cfg.max_nodes_per_job), axis=-1, prepend=0)
            rows[keep == 0] = 0
            states[over] = np.take_along_axis(rows, np.argsort(shuffle, axis=-1), axis=-1)
        # Water-fill node resources in job order.
        job_res = self.job_res[order][:, :, None, :]
        res = states[..., None] * job_res
        res = np.diff(np.minimum(np.cumsum(res, axis=1), self.node_res[None, None]), axis=1, prepend=0)
        big = np.iinfo(np.int64).max
        per = np.where(job_res > 0, res // np.maximum(job_res, 1), big)
        states = per.min(axis=-1)
        states = np.where(states == big, 0, states)
        too_few = states.sum(axis=-1) < self.min_replicas[order]
        states[too_few] = 0
        return np.take_along_axis(states, inverse[..., None], axis=1)


def _dedupe(states, fit, util, weights):
    # Identify duplicate matrices by a random 64-bit linear hash of their entries.
    keys = states.reshape(states.shape[0], -1) @ weights
    _, idx = np.unique(keys, return_index=True)
    idx = np.sort(idx)
    return states[idx], fit[idx], util[idx]


def _rank(fit, util):
    # Highest fitness first; utility then original position break ties.
    return np.lexsort((np.arange(len(fit)), -util, -fit))


def search_allocations(
    jobs: Sequence[SchedJobInfo],
    nodes: Sequence[NodeSpec],
    cfg: FitnessConfig = FitnessConfig(),
    seed: int = 0,
    population: Optional[np.ndarray] = None,
    pop_size: int = POP_SIZE,
    generations: int = GENERATIONS,
    patience: Optional[int] = PATIENCE,
) -> SearchResult:
    """Search for an allocation matrix maximizing the power-mean fitness.

    ``population`` warm-starts the search (e.g. from the previous round); the
    current allocation and the empty matrix are always seeded, so the result
    never scores below either. The loop stops early once the best fitness has
    not improved for ``patience`` generations (``None`` disables this).
    """
    rng = np.random.default_rng(seed)
    J, N = len(jobs), len(nodes)
    if J == 0:
        empty = np.zeros((0, N), dtype=np.int64)
        return SearchResult(empty, 0.0, 0.0, empty[None], np.zeros(1), np.zeros(1))
    prob = AllocationProblem(jobs, nodes, cfg)
    weights = rng.integers(-(2**62), 2**62, size=J * N)
    seeds = [prob.base, np.zeros_like(prob.base), prob.equal_share()]
    if population is not None and len(population):
        seeds.extend(np.asarray(population, dtype=np.int64).reshape(-1, J, N))
    init = np.array(seeds, dtype=np.int64)
    if len(init) < pop_size:
        extra = np.repeat(prob.base[None], pop_size - len(init), axis=0)
        init = np.concatenate([init, prob.mutate(extra, rng)])
    states = prob.repair(init[:pop_size], rng)
    fit, util = prob.evaluate(states)
    states, fit, util = _dedupe(states, fit, util, weights)
    order = _rank(fit, util)
    states, fit, util = states[order], fit[order], util[order]

    stale = 0
    for _ in range(generations):
        if patience is not None and stale >= patience:
            break
        best = fit[0]
        n = len(states)
        matings = max(1, pop_size // 2)
        # Binary tournaments on rank (lower index = better).
        picks = rng.integers(n, size=(2, matings, 2))
        parents = states[picks.min(axis=-1)]
        children = prob.crossover(parents, rng).reshape(-1, J, N)
        children = prob.repair(prob.mutate(children, rng), rng)
        cfit, cutil = prob.evaluate(children)
        states = np.concatenate([states, children])
        fit = np.concatenate([fit, cfit])
        util = np.concatenate([util, cutil])
        states, fit, util = _dedupe(states, fit, util, weights)
        order = _rank(fit, util)[:pop_size]
        states, fit, util = states[order], fit[order], util[order]
        stale = stale + 1 if fit[0] <= best else 0

    return SearchResult(states[0].copy(), float(fit[0]), float(util[0]), states, fit, util)


class PolluxSearch:
    """Stateful wrapper that warm-starts each round from the last population."""

    def __init__(
        self,
        cfg: FitnessConfig = FitnessConfig(),
        seed: int = 0,
        pop_size: int = POP_SIZE,
        generations: int = GENERATIONS,
        patience: Optional[int] = PATIENCE,
    ):
        self.cfg = cfg
        self.patience = patience
        self.rng = np.random.default_rng(seed)
        self.pop_size = pop_size
        self.generations = generations
        self._population: Optional[np.ndarray] = None
        self._keys: list[Hashable] = []
        self._num_nodes = 0

    def _carry(self, keys: Sequence[Hashable], num_nodes: int) -> Optional[np.ndarray]:
        if self._population is None or num_nodes != self._num_nodes:
            return None
        old = {k: i for i, k in enumerate(self._keys)}
        pop = np.zeros((len(self._population), len(keys), num_nodes), dtype=np.int64)
        for j, k in enumerate(keys):
            i = old.get(k)
            if i is not None:
                pop[:, j] = self._population[:, i]
        return pop

    def __call__(self, jobs: Sequence[SchedJobInfo], nodes: Sequence[NodeSpec], keys: Sequence[Hashable]) -> SearchResult:
        seed = int(self.rng.integers(2**31))
        result = search_allocations(
            jobs, nodes, self.cfg, seed, self._carry(keys, len(nodes)), self.pop_size, self.generations, self.patience
        )
        self._population = result.population
        self._keys = list(keys)
        self._num_nodes = len(nodes)
        return result
