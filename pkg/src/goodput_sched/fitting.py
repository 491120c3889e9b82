"""Online estimation of the throughput parameters and the gradient noise scale."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .goodput import AllocationVector, AllocLike, BatchConfig, GoodputError, ThroughputParams

log = logging.getLogger(__name__)

NUM_STARTS = 8
SQ_NORM_FLOOR = 1e-12
_LOWER = np.array([0, 0, 0, 0, 0, 0, 1.0])
_UPPER = np.array([np.inf] * 6 + [10.0])


class FitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ProfilePoint:
    allocation: AllocationVector
    batch: BatchConfig
    observed_t_iter: float

    def __post_init__(self):
        object.__setattr__(self, "allocation", AllocationVector.coerce(self.allocation))
        if not self.observed_t_iter > 0:
            raise GoodputError("observed iteration time must be positive")
        if self.allocation.num_gpus < 1:
            raise GoodputError("no replicas")

    @property
    def key(self) -> tuple:
        # Iteration time only depends on the GPU count and whether nodes are shared.
        a = self.allocation
        return (a.num_gpus, a.num_nodes > 1, self.batch.per_gpu_batch, self.batch.accum_steps)

    def to_dict(self) -> dict:
        return {
            "allocation": list(self.allocation.gpus_per_node),
            "per_gpu_batch": self.batch.per_gpu_batch,
            "accum_steps": self.batch.accum_steps,
            "t_iter_seconds": self.observed_t_iter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProfilePoint":
        return cls(
            AllocationVector(tuple(d["allocation"])),
            BatchConfig(int(d["per_gpu_batch"]), int(d.get("accum_steps", 0))),
            float(d["t_iter_seconds"]),
        )


@dataclass(frozen=True)
class ExplorationState:
    seen_multi_gpu: bool = False
    seen_multi_node: bool = False
    seen_three_plus_gpus: bool = False
    max_gpus_seen: int = 1

    def observe(self, a: AllocLike) -> "ExplorationState":
        a = AllocationVector.coerce(a)
        k = a.num_gpus
        return ExplorationState(
            self.seen_multi_gpu or k >= 2,
            self.seen_multi_node or a.num_nodes >= 2,
            self.seen_three_plus_gpus or k >= 3,
            max(self.max_gpus_seen, k),
        )

    def pinned(self) -> np.ndarray:
        """Mask over the 7-tuple of parameters held at zero by the priors."""
        mask = np.zeros(7, dtype=bool)
        if not self.seen_multi_gpu:
            mask[2] = True
        if not self.seen_multi_node:
            mask[4] = mask[5] = True
        if not self.seen_three_plus_gpus:
            mask[3] = mask[5] = True
        return mask


def allocation_cap(state: ExplorationState) -> int:
    return 2 * state.max_gpus_seen


# --- throughput fitting ----------------------------------------------------------


class _Data:
    def __init__(self, points: Sequence[ProfilePoint]):
        self.k = np.array([p.allocation.num_gpus for p in points], dtype=float)
        self.multi = np.array([p.allocation.num_nodes > 1 for p in points])
        self.m = np.array([p.batch.per_gpu_batch for p in points], dtype=float)
        self.s = np.array([p.batch.accum_steps for p in points], dtype=float)
        self.log_t = np.log([p.observed_t_iter for p in points])

    def predict(self, theta: np.ndarray) -> np.ndarray:
        """Iteration times for a (B, 7) batch of parameter vectors -> (B, n)."""
        th = np.atleast_2d(theta)[:, :, None]
        tg = th[:, 0] + th[:, 1] * self.m
        local = th[:, 2] + th[:, 3] * (self.k - 2)
        node = th[:, 4] + th[:, 5] * (self.k - 2)
        ts = np.where(self.k <= 1, 0.0, np.where(self.multi, node, local))
        ts = np.maximum(ts, 0.0)
        g = th[:, 6]
        top = np.maximum(tg, ts)
        safe = np.where(top > 0, top, 1.0)
        overlap = top * ((tg / safe) ** g + (ts / safe) ** g) ** (1.0 / g)
        return self.s * tg + overlap

    def msle(self, theta: np.ndarray) -> np.ndarray:
        pred = np.maximum(self.predict(theta), 1e-300)
        return np.mean((np.log(pred) - self.log_t) ** 2, axis=-1)


def rmsle(params: ThroughputParams, points: Sequence[ProfilePoint]) -> float:
    if not points:
        raise GoodputError("rmsle needs at least one point")
    return float(math.sqrt(_Data(points).msle(params.as_array())[0]))


def _starts(data: _Data, pinned: np.ndarray, prev: Optional[ThroughputParams], seed: int, num_starts: int):
    rng = np.random.default_rng(seed)
    t_med = float(np.exp(np.median(data.log_t)))
    m_med = float(np.median(data.m))
    scale = np.array([t_med, t_med / m_med, t_med, t_med / 8, t_med, t_med / 8, 1.0])
    starts = []
    if prev is not None:
        starts.append(np.clip(prev.as_array(), _LOWER, _UPPER))
    while len(starts) < num_starts:
        x = rng.uniform(0.0, 1.0, size=7) * scale
        x[6] = rng.uniform(1.0, 4.0)
        starts.append(x)
    starts = np.array(starts)
    starts[:, pinned] = 0.0
    return starts, scale


def fit_throughput(
    points: Sequence[ProfilePoint],
    state: Optional[ExplorationState] = None,
    prev: Optional[ThroughputParams] = None,
    seed: int = 0,
    num_starts: int = NUM_STARTS,
) -> ThroughputParams:
    """Bounded least-squares fit of the iteration-time model in log space.

    Parameters the exploration priors have not yet unlocked are held at zero.
    Each of the deterministic multi-starts runs L-BFGS-B with a central
    finite-difference gradient; the lowest RMSLE wins.
    """
    if not points:
        raise GoodputError("no profile points to fit")
    if state is None:
        state = ExplorationState()
        for p in points:
            state = state.observe(p.allocation)
    data = _Data(points)
    pinned = state.pinned()
    free = ~pinned
    starts, scale = _starts(data, pinned, prev, seed, max(1, num_starts))
    # Optimize dimensionless variables so that every coordinate is O(1).
    scale = np.where(scale > 0, scale, 1.0)
    lo = (_LOWER / scale)[free]
    hi = (_UPPER / scale)[free]
    nfree = int(free.sum())
    steps = np.eye(nfree)

    def expand(z):
        z = np.atleast_2d(z)
        full = np.zeros((z.shape[0], 7))
        full[:, free] = z * scale[free]
        return full

    def fun(z):
        h = 1e-7 * np.maximum(1.0, np.abs(z))
        up = np.minimum(z + steps * h, hi)
        dn = np.maximum(z - steps * h, lo)
        vals = data.msle(expand(np.vstack([z[None, :], up, dn])))
        width = np.diag(up - dn)
        grad = (vals[1 : nfree + 1] - vals[nfree + 1 :]) / np.where(width > 0, width, 1.0)
        return float(vals[0]), grad

    best = None
    for x0 in starts:
        z0 = np.clip(x0[free] / scale[free], lo, hi)
        try:
            res = minimize(
                fun,
                z0,
                jac=True,
                method="L-BFGS-B",
                bounds=list(zip(lo, np.where(np.isinf(hi), None, hi))),
                options={"maxiter": 2000, "ftol": 1e-16, "gtol": 1e-12},
            )
        except (ValueError, FloatingPointError) as exc:  # pragma: no cover - defensive
            log.debug("fit start failed: %s", exc)
            continue
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        warnings.warn("throughput fit failed; keeping previous parameters", FitWarning)
        return prev if prev is not None else prior_params(data)
    theta = np.clip(expand(best.x)[0], _LOWER, _UPPER)
    theta[pinned] = 0.0
    if theta[0] + theta[1] <= 0:
        theta[1] = float(np.exp(np.median(data.log_t - np.log(data.m))))
    return ThroughputParams.from_array(theta)


def prior_params(data: Optional[_Data] = None) -> ThroughputParams:
    """Perfect-scaling parameters used before any iteration time is observed."""
    if data is None:
        return ThroughputParams(0.0, 1.0)
    return ThroughputParams(0.0, float(np.exp(np.median(data.log_t - np.log(data.m)))))


# --- gradient noise scale ------------------------------------------------------


@dataclass(frozen=True)
class GradientStats:
    sq_norm_small: float
    sq_norm_big: float
    b_small: float
    b_big: float

    def __post_init__(self):
        if not self.b_big > self.b_small >= 1:
            raise GoodputError("need b_big > b_small >= 1")


def two_scale_components(stats: GradientStats) -> tuple[float, float]:
    """Unbiased (|g|^2, tr(Sigma)) from squared norms at two batch sizes."""
    bs, bb = stats.b_small, stats.b_big
    g_sq = (bb * stats.sq_norm_big - bs * stats.sq_norm_small) / (bb - bs)
    tr_sigma = (stats.sq_norm_small - stats.sq_norm_big) / (1.0 / bs - 1.0 / bb)
    return g_sq, tr_sigma


def pgns_two_scale(stats: GradientStats, prev: Optional[float] = None) -> float:
    g_sq, tr_sigma = two_scale_components(stats)
    if g_sq <= 0:
        return prev if prev is not None else 0.0
    return max(0.0, tr_sigma / g_sq)


def differenced_components(
    g_prev_sq_norm: float, g_curr_sq_norm: float, diff_sq_norm: float, batch: float
) -> tuple[float, float]:
    """(|g|^2, tr(Sigma)) from two consecutive estimates at the same batch size.

    Assumes the true gradient moves slowly between steps, so the squared norm
    of the difference is twice the per-step variance.
    """
    if batch < 1:
        raise GoodputError("batch must be >= 1")
    var = max(diff_sq_norm, 0.0) / 2.0
    g_sq = max(0.5 * (g_prev_sq_norm + g_curr_sq_norm) - var, SQ_NORM_FLOOR)
    return g_sq, batch * var


def pgns_differenced(g_prev_sq_norm: float, g_curr_sq_norm: float, diff_sq_norm: float, batch: float) -> float:
    g_sq, tr_sigma = differenced_components(g_prev_sq_norm, g_curr_sq_norm, diff_sq_norm, batch)
    return max(0.0, tr_sigma / g_sq)


class PgnsTracker:
    """Smoothed noise scale from a stream of gradient reports.

    The signal and noise components are averaged separately (bias-corrected
    exponential moving averages) and divided at read time.
    """

    def __init__(self, half_life: float = 10.0):
        self.decay = 0.5 ** (1.0 / half_life)
        self._g_sq = 0.0
        self._tr = 0.0
        self._weight = 0.0
        self.phi = 0.0

    def _push(self, g_sq: float, tr_sigma: float) -> float:
        d = self.decay
        self._g_sq = d * self._g_sq + (1 - d) * g_sq
        self._tr = d * self._tr + (1 - d) * tr_sigma
        self._weight = d * self._weight + (1 - d)
        g_avg = self._g_sq / self._weight
        if g_avg > 0:
            self.phi = max(0.0, (self._tr / self._weight) / g_avg)
        return self.phi

    def update_two_scale(self, stats: GradientStats) -> float:
        return self._push(*two_scale_components(stats))

    def update_differenced(self, g_prev_sq_norm, g_curr_sq_norm, diff_sq_norm, batch) -> float:
        return self._push(*differenced_components(g_prev_sq_norm, g_curr_sq_norm, diff_sq_norm, batch))
