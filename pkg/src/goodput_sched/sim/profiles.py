"""Measured job profiles and the interpolation the simulator replays them with."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from ..goodput import AllocationVector, AllocLike, BatchConfig

log = logging.getLogger(__name__)

THROUGHPUT_KEYS = ("nodes", "gpus", "per_gpu_batch", "accum_steps", "t_iter_seconds")
PGNS_KEYS = ("epoch", "total_batch", "phi")


class ProfileError(ValueError):
    pass


def _interp(x: float, xs: np.ndarray, ys: np.ndarray) -> tuple[float, bool]:
    """Linear interpolation clamped to the end points; also reports clamping."""
    clamped = x < xs[0] or x > xs[-1]
    if len(xs) == 1:
        return float(ys[0]), clamped
    return float(np.interp(x, xs, ys)), clamped


@dataclass
class _Placement:
    """Iteration times over an (m, s) grid for one (gpus, nodes) placement."""

    m: np.ndarray
    s: np.ndarray
    t: np.ndarray  # (len(m), len(s))

    def query(self, m: float, s: float) -> tuple[float, bool]:
        clamp_s = s < self.s[0] or s > self.s[-1]
        rows = np.array([_interp(s, self.s, self.t[i])[0] for i in range(len(self.m))])
        value, clamp_m = _interp(m, self.m, rows)
        return value, clamp_m or clamp_s


@dataclass
class ModelProfile:
    name: str
    throughput: list[dict]
    pgns: list[dict]
    dataset_size: float
    m0: int
    max_batch: int
    max_per_gpu_batch: int
    target_epochs: float
    _grid: dict = field(default_factory=dict, init=False, repr=False)
    _pgns_grid: tuple = field(default=(), init=False, repr=False)

    def __post_init__(self):
        if not self.throughput or not self.pgns:
            raise ProfileError(f"{self.name}: tables must be non-empty")
        if any(row["t_iter_seconds"] <= 0 for row in self.throughput):
            raise ProfileError(f"{self.name}: iteration times must be positive")
        if any(row["phi"] < 0 for row in self.pgns):
            raise ProfileError(f"{self.name}: noise scale must be non-negative")
        if not (self.dataset_size > 0 and self.target_epochs > 0 and self.m0 >= 1):
            raise ProfileError(f"{self.name}: dataset_size, target_epochs and m0 must be positive")
        if self.max_batch < self.m0:
            raise ProfileError(f"{self.name}: max_batch below m0")
        self._build()

    def _build(self):
        cells: dict = {}
        for row in self.throughput:
            key = (int(row["gpus"]), int(row["nodes"]))
            cells.setdefault(key, {})[(int(row["per_gpu_batch"]), int(row["accum_steps"]))] = float(
                row["t_iter_seconds"]
            )
        grid: dict[int, dict[int, _Placement]] = {}
        for (g, n), values in cells.items():
            ms = np.array(sorted({k[0] for k in values}), dtype=float)
            ss = np.array(sorted({k[1] for k in values}), dtype=float)
            t = np.full((len(ms), len(ss)), np.nan)
            for (m, s), v in values.items():
                t[np.searchsorted(ms, m), np.searchsorted(ss, s)] = v
            if np.isnan(t).any():
                raise ProfileError(f"{self.name}: (gpus={g}, nodes={n}) is not a full (m, s) grid")
            grid.setdefault(g, {})[n] = _Placement(ms, ss, t)
        self._grid = grid
        epochs = np.array(sorted({float(r["epoch"]) for r in self.pgns}))
        batches = np.array(sorted({float(r["total_batch"]) for r in self.pgns}))
        phi = np.full((len(epochs), len(batches)), np.nan)
        for r in self.pgns:
            phi[np.searchsorted(epochs, r["epoch"]), np.searchsorted(batches, r["total_batch"])] = r["phi"]
        if np.isnan(phi).any():
            raise ProfileError(f"{self.name}: pgns table is not a full (epoch, batch) grid")
        self._pgns_grid = (epochs, batches, phi)
        self._phi_rows: dict = {}
        self._t_iter_cached = lru_cache(maxsize=65536)(self._t_iter)

    # -- queries ----------------------------------------------------------------

    def _at_gpus(self, g: int, nodes: int, m: float, s: float) -> tuple[float, bool]:
        placements = self._grid[g]
        ns = np.array(sorted(placements), dtype=float)
        vals, flags = zip(*(placements[int(n)].query(m, s) for n in ns))
        value, clamped = _interp(nodes, ns, np.array(vals))
        return value, clamped or any(flags)

    def _t_iter(self, gpus: int, nodes: int, m: int, s: int) -> float:
        gs = np.array(sorted(self._grid), dtype=float)
        if gpus <= gs[0] or gpus >= gs[-1] or gpus in self._grid:
            g = int(gs[np.argmin(np.abs(gs - gpus))])
            value, clamped = self._at_gpus(g, nodes, m, s)
            clamped = clamped or gpus != g
        else:
            hi = int(np.searchsorted(gs, gpus))
            g0, g1 = int(gs[hi - 1]), int(gs[hi])
            v0, c0 = self._at_gpus(g0, nodes, m, s)
            v1, c1 = self._at_gpus(g1, nodes, m, s)
            w = (gpus - g0) / (g1 - g0)
            value, clamped = (1 - w) * v0 + w * v1, c0 or c1
        if clamped:
            log.debug("%s: query (gpus=%d, nodes=%d, m=%d, s=%d) clamped to table hull", self.name, gpus, nodes, m, s)
        return value

    def t_iter(self, a: AllocLike, c: BatchConfig) -> float:
        a = AllocationVector.coerce(a)
        if a.num_gpus < 1:
            raise ProfileError("no replicas")
        return self._t_iter_cached(a.num_gpus, a.num_nodes, c.per_gpu_batch, c.accum_steps)

    def phi(self, epoch: float, total_batch: float) -> float:
        return float(self.phi_curve(np.array([epoch]), total_batch)[0])

    def phi_curve(self, epochs: np.ndarray, total_batch: float) -> np.ndarray:
        """Noise scale at many epochs for one total batch size (clamped bilinear)."""
        grid_e, batches, phi = self._pgns_grid
        rows = self._phi_rows.get(total_batch)
        if rows is None:
            if len(batches) == 1:
                rows = phi[:, 0]
            else:
                # Column-wise linear interpolation between the two nearest batch sizes.
                j = int(np.clip(np.searchsorted(batches, total_batch), 1, len(batches) - 1))
                w = float(np.clip((total_batch - batches[j - 1]) / (batches[j] - batches[j - 1]), 0.0, 1.0))
                rows = (1 - w) * phi[:, j - 1] + w * phi[:, j]
            self._phi_rows[total_batch] = rows
        if len(grid_e) == 1:
            return np.full(len(epochs), max(0.0, rows[0]))
        return np.maximum(np.interp(epochs, grid_e, rows), 0.0)

    # -- serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "throughput": self.throughput,
            "pgns": self.pgns,
            "dataset_size": self.dataset_size,
            "m0": self.m0,
            "max_batch": self.max_batch,
            "max_per_gpu_batch": self.max_per_gpu_batch,
            "target_epochs": self.target_epochs,
        }

    @classmethod
    def from_dict(cls, name: str, d: Mapping) -> "ModelProfile":
        try:
            throughput = [{k: row[k] for k in THROUGHPUT_KEYS} for row in d["throughput"]]
            pgns = [{k: row[k] for k in PGNS_KEYS} for row in d["pgns"]]
            max_m = d.get("max_per_gpu_batch") or max(int(r["per_gpu_batch"]) for r in throughput)
            return cls(
                name,
                throughput,
                pgns,
                float(d["dataset_size"]),
                int(d["m0"]),
                int(d["max_batch"]),
                int(max_m),
                float(d["target_epochs"]),
            )
        except (KeyError, TypeError) as exc:
            raise ProfileError(f"{name}: malformed profile ({exc!r})") from exc


class ProfileLibrary(dict):
    """Mapping of model name to ModelProfile."""

    def get_model(self, name: str) -> ModelProfile:
        try:
            return self[name]
        except KeyError:
            raise ProfileError(f"unknown model {name!r}") from None

    def to_json(self) -> str:
        return json.dumps({k: v.to_dict() for k, v in sorted(self.items())}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ProfileLibrary":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_dict(cls, data) -> "ProfileLibrary":
        if not isinstance(data, dict) or not data:
            raise ProfileError("profile file must be a non-empty object keyed by model")
        return cls({name: ModelProfile.from_dict(name, d) for name, d in data.items()})

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ProfileLibrary":
        return cls.from_json(Path(path).read_text())

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json())


def interpolate_throughput(lib: ProfileLibrary, model: str, a: AllocLike, c: BatchConfig) -> float:
    """Iteration seconds for the placement and batch config, by clamped piecewise-linear interpolation."""
    return lib.get_model(model).t_iter(a, c)


def default_library() -> ProfileLibrary:
    from importlib import resources

    text = resources.files("goodput_sched").joinpath("data/profiles.json").read_text()
    return ProfileLibrary.from_json(text)
