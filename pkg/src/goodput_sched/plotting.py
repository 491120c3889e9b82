"""Figures rendered from the CSV outputs of the command-line tools.

Every function takes parsed CSV rows (lists of dicts with string values) so
plots can be regenerated from files alone. Rendering uses the Agg backend
and strips PNG metadata, which keeps repeated renders byte-identical.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PathLike = Union[str, Path]
_SAVE = {"dpi": 120, "metadata": {"Software": None}}


def read_rows(path: PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _col(rows: Sequence[Mapping], key: str) -> np.ndarray:
    return np.array([float(r[key]) if r[key] != "" else np.nan for r in rows])


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_timeline(rows: Sequence[Mapping], path: PathLike) -> Path:
    """Allocated GPUs and mean statistical efficiency over time."""
    t = _col(rows, "t") / 3600.0
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 4.5), sharex=True)
    top.step(t, _col(rows, "allocated_gpus"), where="post")
    top.set_ylabel("allocated GPUs")
    bottom.step(t, _col(rows, "mean_efficiency"), where="post", color="tab:green")
    bottom.set_ylabel("mean efficiency")
    bottom.set_xlabel("time (h)")
    bottom.set_ylim(0, 1.05)
    return _save(fig, path)


def plot_jct_cdf(rows: Sequence[Mapping], path: PathLike) -> Path:
    jct = np.sort(_col(rows, "jct_s")) / 3600.0
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.step(jct, np.arange(1, len(jct) + 1) / max(len(jct), 1), where="post")
    ax.set_xscale("log")
    ax.set_xlabel("job completion time (h)")
    ax.set_ylabel("fraction of jobs")
    return _save(fig, path)


def plot_rho_cdf(rows: Sequence[Mapping], path: PathLike) -> Path:
    rho = _col(rows, "rho")
    rho = np.sort(rho[np.isfinite(rho)])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if len(rho):
        ax.step(rho, np.arange(1, len(rho) + 1) / len(rho), where="post")
    ax.axvline(1.0, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("finish-time fairness (rho)")
    ax.set_ylabel("fraction of jobs")
    return _save(fig, path)


def plot_sweep(rows: Sequence[Mapping], axis: str, path: PathLike, metric: str = "avg_jct") -> Path:
    """Mean of ``metric`` against one sweep axis, one line per policy, with CI bars."""
    groups: dict[str, list[Mapping]] = defaultdict(list)
    for r in rows:
        groups[r["policy"]].append(r)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for policy in sorted(groups):
        g = sorted(groups[policy], key=lambda r: float(r[axis]))
        x = _col(g, axis)
        y = _col(g, f"{metric}_mean") / 3600.0
        err = np.nan_to_num(_col(g, f"{metric}_ci95") / 3600.0)
        ax.errorbar(x, y, yerr=err, marker="o", capsize=3, label=policy)
    ax.set_xlabel(axis)
    ax.set_ylabel(f"{metric} (h)")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_autoscale(series: Mapping[str, Sequence[Mapping]], path: PathLike) -> Path:
    """Node count and statistical efficiency over time for each scaling mode."""
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 4.5), sharex=True)
    for mode in sorted(series):
        rows = series[mode]
        t = _col(rows, "t") / 3600.0
        top.step(t, _col(rows, "nodes"), where="post", label=mode)
        bottom.plot(t, _col(rows, "efficiency"), label=mode)
    top.set_ylabel("nodes")
    top.legend(frameon=False)
    bottom.set_ylabel("efficiency")
    bottom.set_xlabel("time (h)")
    bottom.set_ylim(0, 1.05)
    return _save(fig, path)


SWEEP_AXES = ("p", "interval", "slowdown", "load_multiplier")


def render_dir(out: PathLike) -> list[Path]:
    """Render every figure whose source CSV exists in ``out``."""
    out = Path(out)
    made: list[Path] = []
    if (out / "timeline.csv").exists():
        made.append(plot_timeline(read_rows(out / "timeline.csv"), out / "timeline.png"))
    if (out / "metrics.csv").exists():
        rows = read_rows(out / "metrics.csv")
        made.append(plot_jct_cdf(rows, out / "jct_cdf.png"))
        if any(r["rho"] != "" for r in rows):
            made.append(plot_rho_cdf(rows, out / "rho_cdf.png"))
    if (out / "sweep.csv").exists():
        rows = read_rows(out / "sweep.csv")
        for axis in _varying(rows, SWEEP_AXES):
            made.append(plot_sweep(rows, axis, out / f"sweep_{axis}.png"))
    series = {p.stem.split("_", 1)[1]: read_rows(p) for p in sorted(out.glob("autoscale_*.csv"))}
    if series:
        made.append(plot_autoscale(series, out / "autoscale.png"))
    return made


def _varying(rows: Sequence[Mapping], axes: Iterable[str]) -> list[str]:
    return [a for a in axes if len({r[a] for r in rows}) > 1]
