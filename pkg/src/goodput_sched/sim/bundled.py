"""Synthetic stand-ins for the six evaluation models.

Iteration times come from the closed-form throughput model with per-model
ground-truth parameters plus 2% log-normal measurement noise; the noise scale
grows geometrically from ``phi_start`` to ``phi_end`` over training. The
generated library is shipped as ``data/profiles.json``; regenerate it with
``python -m goodput_sched.sim.bundled``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..goodput import BatchConfig, ThroughputParams, t_iter
from .profiles import ModelProfile, ProfileLibrary

GPUS_PER_NODE = 4
MAX_NODES = 16
GPU_GRID = (1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64)
ACCUM_GRID = (0, 1, 3, 7, 15)
NOISE = 0.02
SEED = 0


@dataclass(frozen=True)
class SyntheticModel:
    name: str
    category: str
    params: ThroughputParams
    m0: int
    max_per_gpu_batch: int
    max_batch: int
    dataset_size: int
    target_epochs: float
    phi_start: float
    phi_end: float

    def phi(self, epoch: float) -> float:
        frac = min(max(epoch / self.target_epochs, 0.0), 1.0)
        return self.phi_start * (self.phi_end / self.phi_start) ** frac


MODELS = (
    SyntheticModel(
        "cifar10", "S", ThroughputParams(0.012, 0.0008, 0.03, 0.002, 0.12, 0.006, 1.6),
        m0=128, max_per_gpu_batch=256, max_batch=4096, dataset_size=50_000, target_epochs=30,
        phi_start=150.0, phi_end=3000.0,
    ),
    SyntheticModel(
        "ncf", "S", ThroughputParams(0.004, 0.00002, 0.012, 0.001, 0.06, 0.004, 1.3),
        m0=256, max_per_gpu_batch=8192, max_batch=32768, dataset_size=1_000_000, target_epochs=12,
        phi_start=2000.0, phi_end=8000.0,
    ),
    SyntheticModel(
        "deepspeech2", "M", ThroughputParams(0.05, 0.02, 0.08, 0.01, 0.35, 0.02, 1.8),
        m0=20, max_per_gpu_batch=40, max_batch=640, dataset_size=12_000, target_epochs=40,
        phi_start=40.0, phi_end=600.0,
    ),
    SyntheticModel(
        "bert", "M", ThroughputParams(0.03, 0.035, 0.1, 0.015, 0.5, 0.03, 1.5),
        m0=12, max_per_gpu_batch=16, max_batch=384, dataset_size=88_000, target_epochs=2,
        phi_start=80.0, phi_end=300.0,
    ),
    SyntheticModel(
        "yolov3", "L", ThroughputParams(0.08, 0.06, 0.15, 0.02, 0.6, 0.04, 1.7),
        m0=8, max_per_gpu_batch=8, max_batch=512, dataset_size=16_500, target_epochs=40,
        phi_start=20.0, phi_end=600.0,
    ),
    SyntheticModel(
        "imagenet", "XL", ThroughputParams(0.05, 0.0035, 0.05, 0.004, 0.12, 0.003, 2.5),
        m0=200, max_per_gpu_batch=256, max_batch=12800, dataset_size=1_281_167, target_epochs=80,
        phi_start=1000.0, phi_end=20000.0,
    ),
)

MODELS_BY_NAME = {m.name: m for m in MODELS}


def node_counts(gpus: int) -> list[int]:
    lo = math.ceil(gpus / GPUS_PER_NODE)
    hi = min(gpus, MAX_NODES)
    return sorted({lo} | {n for n in (1, 2, 4, 8, 16) if lo <= n <= hi})


def batch_grid(model: SyntheticModel) -> list[int]:
    top = model.max_per_gpu_batch
    vals = np.unique(np.round(np.geomspace(1, top, 7)).astype(int))
    return sorted(set(vals.tolist()) | {min(model.m0, top)})


def pgns_table(model: SyntheticModel) -> list[dict]:
    epochs = np.linspace(0.0, model.target_epochs, 21)
    batches = [model.m0 * 2**i for i in range(0, 20) if model.m0 * 2**i <= model.max_batch]
    if batches[-1] != model.max_batch:
        batches.append(model.max_batch)
    return [
        {"epoch": round(float(e), 6), "total_batch": int(b), "phi": round(model.phi(float(e)), 6)}
        for e in epochs
        for b in batches
    ]


def throughput_table(model: SyntheticModel, rng: np.random.Generator) -> list[dict]:
    rows = []
    for g in GPU_GRID:
        for n in node_counts(g):
            per_node = [g // n + (1 if i < g % n else 0) for i in range(n)]
            for m in batch_grid(model):
                for s in ACCUM_GRID:
                    t = t_iter(model.params, per_node, BatchConfig(m, s)) * math.exp(rng.normal(0.0, NOISE))
                    rows.append(
                        {"nodes": n, "gpus": g, "per_gpu_batch": m, "accum_steps": s, "t_iter_seconds": round(t, 9)}
                    )
    return rows


def build_library(seed: int = SEED) -> ProfileLibrary:
    rng = np.random.default_rng(seed)
    lib = ProfileLibrary()
    for model in MODELS:
        lib[model.name] = ModelProfile(
            model.name,
            throughput_table(model, rng),
            pgns_table(model),
            float(model.dataset_size),
            model.m0,
            model.max_batch,
            model.max_per_gpu_batch,
            float(model.target_epochs),
        )
    return lib


def main() -> None:
    out = Path(__file__).resolve().parent.parent / "data" / "profiles.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    build_library().save(out)
    print(out)


if __name__ == "__main__":
    main()
