import os

import pytest
from hypothesis import HealthCheck, settings

from goodput_sched.sim.profiles import ModelProfile, default_library

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def library():
    return default_library()


def flat_profile(
    name="flat",
    t=1.0,
    m0=10,
    dataset=1000.0,
    epochs=1.0,
    phi=0.0,
    gpus=(1, 2, 4),
    per_node=4,
    max_m=20,
):
    """A profile whose iteration time is ``t`` everywhere and whose noise scale is constant."""
    rows = []
    for g in gpus:
        for n in sorted({-(-g // per_node), g}) if g > 1 else [1]:
            if n > g or g / n > per_node:
                continue
            for m in (1, max_m):
                for s in (0, 15):
                    rows.append({"nodes": n, "gpus": g, "per_gpu_batch": m, "accum_steps": s, "t_iter_seconds": t})
    pgns = [{"epoch": e, "total_batch": b, "phi": phi} for e in (0.0, epochs) for b in (m0, 100 * m0)]
    return ModelProfile(name, rows, pgns, dataset, m0, 100 * m0, max_m, epochs)


# Acceptance verdicts, echoed in the terminal summary so they survive output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
