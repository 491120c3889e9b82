"""Throughput, statistical efficiency and goodput of a data-parallel training job.

The iteration-time model combines a linear per-GPU compute time with a
placement-dependent synchronization time, blended by an overlap exponent
``gamma``. Goodput is throughput multiplied by the statistical efficiency
predicted from the (pre-conditioned) gradient noise scale ``phi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Union

import numpy as np

MAX_ACCUM_STEPS = 15


class GoodputError(ValueError):
    pass


@dataclass(frozen=True)
class AllocationVector:
    """GPUs assigned to a job on each node."""

    gpus_per_node: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "gpus_per_node", tuple(int(x) for x in self.gpus_per_node))
        if any(x < 0 for x in self.gpus_per_node):
            raise GoodputError("allocation entries must be non-negative")

    @property
    def num_gpus(self) -> int:
        return sum(self.gpus_per_node)

    @property
    def num_nodes(self) -> int:
        return sum(1 for x in self.gpus_per_node if x > 0)

    @classmethod
    def coerce(cls, a: "AllocLike") -> "AllocationVector":
        if isinstance(a, AllocationVector):
            return a
        return cls(tuple(np.asarray(a, dtype=np.int64).ravel().tolist()))


AllocLike = Union[AllocationVector, Sequence[int], np.ndarray]


@dataclass(frozen=True)
class BatchConfig:
    per_gpu_batch: int
    accum_steps: int = 0

    def __post_init__(self):
        if self.per_gpu_batch < 1:
            raise GoodputError("per-GPU batch size must be >= 1")
        if self.accum_steps < 0:
            raise GoodputError("accumulation steps must be >= 0")


@dataclass(frozen=True)
class ThroughputParams:
    alpha_grad: float
    beta_grad: float
    alpha_sync_local: float = 0.0
    beta_sync_local: float = 0.0
    alpha_sync_node: float = 0.0
    beta_sync_node: float = 0.0
    gamma: float = 1.0

    FIELDS = (
        "alpha_grad",
        "beta_grad",
        "alpha_sync_local",
        "beta_sync_local",
        "alpha_sync_node",
        "beta_sync_node",
        "gamma",
    )

    def __post_init__(self):
        for name in self.FIELDS[:-1]:
            if getattr(self, name) < 0:
                raise GoodputError(f"{name} must be non-negative")
        if not 1.0 <= self.gamma <= 10.0:
            raise GoodputError("gamma must lie in [1, 10]")
        if self.alpha_grad + self.beta_grad <= 0:
            raise GoodputError("gradient time must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in self.FIELDS], dtype=float)

    @classmethod
    def from_array(cls, values: Iterable[float]) -> "ThroughputParams":
        return cls(*(float(v) for v in values))

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "ThroughputParams":
        return cls(**{f: float(d[f]) for f in cls.FIELDS})


@dataclass(frozen=True)
class GoodputModel:
    params: ThroughputParams
    pgns: float
    init_batch: int
    max_batch: Optional[int] = None
    max_per_gpu_batch: Optional[int] = None
    non_adaptive: bool = False

    def __post_init__(self):
        if self.init_batch < 1:
            raise GoodputError("initial batch size must be >= 1")
        # Noisy estimators can dip below zero; the efficiency model needs phi >= 0.
        if not self.pgns >= 0:
            object.__setattr__(self, "pgns", 0.0)
        if self.max_batch is not None and self.max_batch < self.init_batch:
            raise GoodputError("max_batch must be >= init_batch")
        if self.max_per_gpu_batch is None:
            object.__setattr__(self, "max_per_gpu_batch", self.init_batch)
        if self.max_per_gpu_batch < 1:
            raise GoodputError("max_per_gpu_batch must be >= 1")

    def with_pgns(self, pgns: float) -> "GoodputModel":
        return replace(self, pgns=pgns)

    def with_params(self, params: ThroughputParams) -> "GoodputModel":
        return replace(self, params=params)


# --- vectorized primitives -------------------------------------------------


def _t_grad(p: ThroughputParams, m):
    return p.alpha_grad + p.beta_grad * m


def _t_sync(p: ThroughputParams, num_gpus, multi_node):
    k = np.asarray(num_gpus, dtype=float)
    local = p.alpha_sync_local + p.beta_sync_local * (k - 2)
    node = p.alpha_sync_node + p.beta_sync_node * (k - 2)
    out = np.where(np.asarray(multi_node, dtype=bool), node, local)
    return np.where(k <= 1, 0.0, out)


def _t_iter(p: ThroughputParams, num_gpus, multi_node, m, s):
    tg = _t_grad(p, np.asarray(m, dtype=float))
    ts = _t_sync(p, num_gpus, multi_node)
    g = p.gamma
    # Scale by the larger term before exponentiating; gamma up to 10 overflows otherwise.
    top = np.maximum(tg, ts)
    safe = np.where(top > 0, top, 1.0)
    overlap = top * ((tg / safe) ** g + (ts / safe) ** g) ** (1.0 / g)
    return np.asarray(s, dtype=float) * tg + overlap


def _efficiency(model: GoodputModel, total_batch):
    total_batch = np.asarray(total_batch, dtype=float)
    if model.non_adaptive:
        return np.ones_like(total_batch)
    phi = model.pgns
    if math.isinf(phi):
        return np.ones_like(total_batch)
    return (phi + model.init_batch) / (phi + total_batch)


def _goodput(model: GoodputModel, num_gpus, multi_node, m, s):
    k = np.asarray(num_gpus, dtype=float)
    total = k * m * (np.asarray(s) + 1)
    thr = total / _t_iter(model.params, num_gpus, multi_node, m, s)
    return thr * _efficiency(model, total)


# --- scalar API --------------------------------------------------------------


def total_batch_size(a: AllocLike, c: BatchConfig) -> int:
    a = AllocationVector.coerce(a)
    if a.num_gpus < 1:
        raise GoodputError("no replicas")
    return a.num_gpus * c.per_gpu_batch * (c.accum_steps + 1)


def t_grad(p: ThroughputParams, m: float) -> float:
    return float(_t_grad(p, m))


def t_sync(p: ThroughputParams, a: AllocLike) -> float:
    a = AllocationVector.coerce(a)
    if a.num_gpus < 1:
        raise GoodputError("no replicas")
    return float(_t_sync(p, a.num_gpus, a.num_nodes > 1))


def t_iter(p: ThroughputParams, a: AllocLike, c: BatchConfig) -> float:
    a = AllocationVector.coerce(a)
    if a.num_gpus < 1:
        raise GoodputError("no replicas")
    return float(_t_iter(p, a.num_gpus, a.num_nodes > 1, c.per_gpu_batch, c.accum_steps))


def throughput(g: GoodputModel, a: AllocLike, c: BatchConfig) -> float:
    """Examples processed per second."""
    return total_batch_size(a, c) / t_iter(g.params, a, c)


def efficiency(g: GoodputModel, total_batch: float) -> float:
    if total_batch < g.init_batch:
        raise GoodputError("below initial batch size")
    return float(_efficiency(g, total_batch))


def goodput(g: GoodputModel, a: AllocLike, c: BatchConfig) -> float:
    return throughput(g, a, c) * efficiency(g, total_batch_size(a, c))


# --- batch-configuration optimization ------------------------------------------


@dataclass
class BatchTable:
    """Optimal (m, s) and goodput for each queried (num_gpus, multi_node) shape.

    Entries with no feasible configuration carry goodput 0 and m = s = 0.
    """

    num_gpus: np.ndarray
    multi_node: np.ndarray
    per_gpu_batch: np.ndarray
    accum_steps: np.ndarray
    goodput: np.ndarray
    total_batch: np.ndarray = field(init=False)

    def __post_init__(self):
        self.total_batch = self.num_gpus * self.per_gpu_batch * (self.accum_steps + 1)


def _m_bounds(model: GoodputModel, k: np.ndarray, s: np.ndarray):
    reps = k * (s + 1)
    lo = np.maximum(1, -(-model.init_batch // reps))
    hi = np.full_like(lo, model.max_per_gpu_batch)
    if model.non_adaptive:
        hi = np.minimum(hi, lo)
    if model.max_batch is not None:
        hi = np.minimum(hi, model.max_batch // reps)
    return lo, hi


def optimize_batch_table(
    model: GoodputModel,
    num_gpus: Sequence[int],
    multi_node: Sequence[bool],
    objective: str = "goodput",
) -> BatchTable:
    """Exact argmax of the objective over integer (m, s) for many shapes at once.

    For fixed K and s the objective is quasi-concave in m (a linear numerator
    over a convex, non-decreasing denominator), so the first m at which the
    forward difference stops being positive is the smallest maximizer; it is
    found by bisection. Ties across s resolve toward smaller M, then smaller s.
    """
    if objective not in ("goodput", "throughput"):
        raise GoodputError(f"unknown objective {objective!r}")
    if objective == "throughput":
        # Throughput is goodput with efficiency pinned to one.
        model = replace(model, non_adaptive=False, pgns=math.inf)
    k = np.asarray(num_gpus, dtype=np.int64).reshape(-1, 1)
    mn = np.asarray(multi_node, dtype=bool).reshape(-1, 1)
    s = np.arange(MAX_ACCUM_STEPS + 1, dtype=np.int64).reshape(1, -1)
    k, mn, s = np.broadcast_arrays(k, mn, s)
    kk = np.maximum(k, 1)
    lo, hi = _m_bounds(model, kk, s)
    feasible = (lo <= hi) & (k >= 1)

    def f(m):
        return _goodput(model, kk, mn, m, s)

    # Invariant: the smallest maximizer lies in [a, b].
    a = lo.copy()
    b = np.where(feasible, hi, lo)
    while True:
        active = a < b
        if not active.any():
            break
        mid = (a + b) // 2
        rising = f(mid + 1) > f(mid)
        a = np.where(active & rising, mid + 1, a)
        b = np.where(active & ~rising, mid, b)
    best_m = a
    vals = np.where(feasible, f(best_m), -np.inf)
    total = kk * best_m * (s + 1)

    # Pick the best s per row with the tie-break order (value desc, M asc, s asc).
    rows = vals.shape[0]
    top = vals.max(axis=1, keepdims=True)
    cand = vals >= top * (1 - 1e-12)
    big = np.iinfo(np.int64).max
    key_total = np.where(cand, total, big)
    min_total = key_total.min(axis=1, keepdims=True)
    cand &= key_total == min_total
    idx = np.argmax(cand, axis=1)
    r = np.arange(rows)
    ok = np.isfinite(vals[r, idx])
    out_m = np.where(ok, best_m[r, idx], 0)
    out_s = np.where(ok, s[r, idx], 0)
    out_g = np.where(ok, vals[r, idx], 0.0)
    return BatchTable(
        num_gpus=k[:, 0].copy(),
        multi_node=mn[:, 0].copy(),
        per_gpu_batch=out_m,
        accum_steps=out_s,
        goodput=out_g,
    )


def optimize_batch_config(
    g: GoodputModel, a: AllocLike, objective: str = "goodput"
) -> tuple[BatchConfig, float]:
    a = AllocationVector.coerce(a)
    if a.num_gpus < 1:
        raise GoodputError("no replicas")
    table = optimize_batch_table(g, [a.num_gpus], [a.num_nodes > 1], objective)
    if table.per_gpu_batch[0] < 1:
        raise GoodputError("infeasible batch")
    cfg = BatchConfig(int(table.per_gpu_batch[0]), int(table.accum_steps[0]))
    return cfg, float(table.goodput[0])


def fixed_batch_config(total_batch: int, num_gpus: int, max_per_gpu_batch: int) -> BatchConfig:
    """Per-GPU batch and accumulation realizing a user-fixed total batch size.

    Uses the smallest s whose per-GPU share fits in memory; the realized total
    may exceed the request by less than one example per replica-step.
    """
    if num_gpus < 1:
        raise GoodputError("no replicas")
    s = max(0, -(-total_batch // (num_gpus * max_per_gpu_batch)) - 1)
    m = -(-total_batch // (num_gpus * (s + 1)))
    return BatchConfig(max(1, m), s)


# --- learning-rate scaling plug-ins ---------------------------------------------


@dataclass(frozen=True)
class LrScaleRule:
    kind: str
    pgns: Optional[float] = None

    KINDS = ("linear", "square_root", "adascale")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise GoodputError(f"unknown LR scaling rule {self.kind!r}")


def scale_lr(rule: LrScaleRule, init_batch: float, total_batch: float) -> float:
    if not total_batch >= init_batch >= 1:
        raise GoodputError("scale_lr requires M >= M0 >= 1")
    ratio = total_batch / init_batch
    if rule.kind == "linear":
        return ratio
    if rule.kind == "square_root":
        return math.sqrt(ratio)
    if rule.pgns is None:
        raise GoodputError("adascale requires a gradient noise scale")
    phi = max(rule.pgns, 0.0)
    return (phi / init_batch + 1.0) / (phi / total_batch + 1.0)
