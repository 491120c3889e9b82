import json
import math

import numpy as np
import pytest

from goodput_sched.goodput import BatchConfig
from goodput_sched.sched.core import NodeSpec
from goodput_sched.sim import simulator as sim
from goodput_sched.sim.fairness import isolated_jcts, partition_nodes, run_with_fairness
from goodput_sched.sim.metrics import (
    CSV_COLUMNS,
    JobRecord,
    MetricsError,
    MetricsReport,
    finish_time_fairness,
    mean_ci,
    parse_metrics_csv,
)
from goodput_sched.sim.profiles import ModelProfile, ProfileError, ProfileLibrary, interpolate_throughput
from goodput_sched.workload import JobSpec, WorkloadSpec

from . import oracles
from .conftest import flat_profile


def lib_of(*profiles):
    return ProfileLibrary({p.name: p for p in profiles})


def fixed_job(job_id="j0", model="flat", submit=0.0, gpus=1, batch=10, mode="tuned"):
    return JobSpec(job_id, model, submit, "S", mode, gpus, batch)


def world_with(jobs, nodes=4, cfg=None, profile=None):
    profile = profile or flat_profile()
    cfg = cfg or sim.SimConfig(policy="tiresias")
    states = [sim.JobState(j, profile, np.zeros(nodes, dtype=np.int64)) for j in jobs]
    return sim.World(0.0, states, [NodeSpec.gpus(4) for _ in range(nodes)], cfg)


# --- profiles ------------------------------------------------------------------------


def grid_profile():
    rows = []
    for m in (8, 16):
        for s in (0, 1):
            for g, n in ((1, 1), (4, 1), (8, 2)):
                rows.append({"nodes": n, "gpus": g, "per_gpu_batch": m, "accum_steps": s, "t_iter_seconds": 0.1 * g + 0.01 * m + 0.5 * s})
    pgns = [{"epoch": e, "total_batch": b, "phi": 100.0 + 10 * e + b} for e in (0.0, 10.0) for b in (8, 64)]
    return ModelProfile("grid", rows, pgns, 1000.0, 8, 256, 16, 10.0)


def test_interpolation_identity_midpoint_and_clamp():
    lib = lib_of(grid_profile())
    assert interpolate_throughput(lib, "grid", (4,), BatchConfig(8)) == pytest.approx(0.48)
    lo = interpolate_throughput(lib, "grid", (4,), BatchConfig(8))
    hi = interpolate_throughput(lib, "grid", (4,), BatchConfig(16))
    assert interpolate_throughput(lib, "grid", (4,), BatchConfig(12)) == pytest.approx((lo + hi) / 2)
    # Beyond the largest m the query sits on the face m = 16.
    assert interpolate_throughput(lib, "grid", (4,), BatchConfig(64)) == pytest.approx(hi)
    assert interpolate_throughput(lib, "grid", (64, 0), BatchConfig(8)) == pytest.approx(
        interpolate_throughput(lib, "grid", (4, 4), BatchConfig(8))
    )
    with pytest.raises(ProfileError):
        interpolate_throughput(lib, "nope", (1,), BatchConfig(8))


def test_pgns_interpolates_between_batches():
    p = grid_profile()
    assert p.phi(0.0, 8) == pytest.approx(108.0)
    assert p.phi(5.0, 36) == pytest.approx(100 + 50 + 36)
    assert p.phi(50.0, 1000) == pytest.approx(100 + 100 + 64)


def test_profile_json_round_trip_and_errors(tmp_path):
    lib = lib_of(grid_profile())
    path = tmp_path / "p.json"
    lib.save(path)
    again = ProfileLibrary.load(path)
    assert again.to_json() == lib.to_json()
    with pytest.raises(ProfileError):
        ProfileLibrary.from_json(json.dumps({"x": {"throughput": []}}))
    with pytest.raises(ProfileError):
        ProfileLibrary.from_json("[]")
    bad = json.loads(lib.to_json())
    bad["grid"]["throughput"][0]["t_iter_seconds"] = -1
    with pytest.raises(ProfileError):
        ProfileLibrary.from_dict(bad)


def test_bundled_library_complete(library):
    assert sorted(library) == ["bert", "cifar10", "deepspeech2", "imagenet", "ncf", "yolov3"]
    for prof in library.values():
        assert all(r["t_iter_seconds"] > 0 for r in prof.throughput)
        assert all(r["phi"] >= 0 for r in prof.pgns)


# --- stepping --------------------------------------------------------------------------


def test_constant_job_completes_one_epoch_in_100s():
    w = world_with([fixed_job()])
    job = w.jobs[0]
    job.allocation[0] = 1
    job.batch = BatchConfig(10)
    sim.step(w, 99.0)
    assert job.progress == pytest.approx(0.99)
    sim.step(w, 1.0)
    assert job.done and job.completion_time == pytest.approx(100.0)


def test_restart_delay_blocks_progress():
    w = world_with([fixed_job()])
    job = w.jobs[0]
    job.allocation[0] = 1
    job.batch = BatchConfig(10)
    job.delay = 30.0
    sim.step(w, 30.0)
    assert job.progress == 0.0 and job.delay == 0.0
    sim.step(w, 10.0)
    assert job.progress == pytest.approx(0.1)


def test_slowdown_doubles_iteration_time_of_colocated_distributed_jobs():
    cfg = sim.SimConfig(policy="tiresias", slowdown=0.5)
    w = world_with([fixed_job("a", gpus=2), fixed_job("b", gpus=2), fixed_job("c")], nodes=2, cfg=cfg)
    a, b, c = w.jobs
    a.allocation[:] = [1, 1]
    b.allocation[:] = [1, 1]
    c.allocation[:] = [1, 0]
    for j in w.jobs:
        j.batch = BatchConfig(10)
    assert sim.interference_factors(w) == {"a": 2.0, "b": 2.0}
    sim.step(w, 10.0)
    assert a.progress == pytest.approx(0.05) and c.progress == pytest.approx(0.1)


def test_apply_allocations_restart_accounting():
    w = world_with([fixed_job("a"), fixed_job("b")], nodes=2)
    jobs = w.jobs
    sim.apply_allocations(w, jobs, np.array([[1, 0], [0, 1]]))
    assert [j.restarts for j in jobs] == [0, 0] and all(j.started for j in jobs)
    sim.apply_allocations(w, jobs, np.array([[1, 0], [0, 1]]))
    assert [j.restarts for j in jobs] == [0, 0]
    sim.apply_allocations(w, jobs, np.array([[2, 0], [0, 1]]))
    assert [j.restarts for j in jobs] == [1, 0] and jobs[0].delay == 30.0
    jobs[0].batch = BatchConfig(5)
    jobs[1].batch = BatchConfig(10)
    for _ in range(30):
        sim.step(w, 1.0)
    assert jobs[0].delay == 0.0
    jobs[0].progress = 0.4
    sim.apply_allocations(w, jobs, np.array([[0, 0], [0, 1]]))
    assert jobs[0].progress == 0.4 and jobs[0].batch is None and jobs[0].restarts == 1
    with pytest.raises(sim.SimulationError):
        sim.apply_allocations(w, jobs, np.array([[4, 0], [1, 4]]))


def test_sim_config_validation():
    with pytest.raises(sim.SimulationError):
        sim.SimConfig(policy="fifo")
    with pytest.raises(sim.SimulationError):
        sim.SimConfig(interval=1.5)
    with pytest.raises(sim.SimulationError):
        sim.SimConfig(slowdown=1.0)


# --- whole runs ---------------------------------------------------------------------------


def test_empty_workload():
    rep = sim.run(WorkloadSpec((), "tuned", 0), lib_of(flat_profile()), sim.SimConfig(policy="tiresias"))
    assert rep.records == () and rep.summary()["avg_jct"] is None


@pytest.mark.parametrize("submit", [0.0, 10.0, 61.5])
def test_single_job_matches_closed_form(submit):
    prof = flat_profile(t=0.7)
    wl = WorkloadSpec((fixed_job(submit=submit),), "tuned", 0)
    rep = sim.run(wl, lib_of(prof), sim.SimConfig(policy="tiresias"))
    expect = oracles.constant_job_jct(submit, 60.0, 0.7, 10, prof.dataset_size, prof.target_epochs)
    assert abs(rep.records[0].jct_s - expect) <= 1.0


def test_isolated_jct_invariant_to_interval():
    wl = WorkloadSpec((fixed_job(gpus=2, batch=20),), "tuned", 0)
    jcts = [sim.run(wl, lib_of(flat_profile(t=0.3)), sim.SimConfig(policy="tiresias", interval=i)).records[0].jct_s for i in (30.0, 60.0, 240.0)]
    assert len(set(jcts)) == 1


def small_pollux_workload(library, n=6):
    models = ["cifar10", "ncf", "bert"]
    jobs = tuple(JobSpec(f"job-{i}", models[i % 3], 120.0 * i, "S", "pollux") for i in range(n))
    return WorkloadSpec(jobs, "pollux", 0)


def checked_run(monkeypatch, wl, lib, cfg):
    """Run while asserting capacity, avoidance and accounting invariants before every step."""
    real_step = sim.step
    seen = {"steps": 0}

    def step(world, dt):
        A = np.array([j.allocation for j in world.jobs if not j.done]).reshape(-1, len(world.nodes))
        cap = np.array([n.resources["gpu"] for n in world.nodes])
        assert np.all(A.sum(axis=0) <= cap)
        if world.cfg.interference_avoidance and world.cfg.policy == "pollux":
            dist = A[np.count_nonzero(A, axis=1) > 1]
            assert np.all(np.count_nonzero(dist, axis=0) <= 1)
        before = [j.progress for j in world.jobs]
        out = real_step(world, dt)
        assert all(j.progress >= p for j, p in zip(world.jobs, before))
        assert all(j.useful_examples <= j.examples * (1 + 1e-12) for j in world.jobs)
        seen["steps"] += 1
        return out

    monkeypatch.setattr(sim, "step", step)
    rep = sim.run(wl, lib, cfg)
    assert seen["steps"] > 0
    return rep


def test_pollux_run_invariants_and_determinism(monkeypatch, library):
    wl = small_pollux_workload(library)
    cfg = sim.SimConfig(policy="pollux", seed=3, num_nodes=2)
    a = checked_run(monkeypatch, wl, library, cfg)
    b = sim.run(wl, library, cfg)
    assert a.to_csv() == b.to_csv() and a.timeline_csv() == b.timeline_csv()
    assert len(a.records) == 6 and all(r.complete_s > r.submit_s for r in a.records)


def test_pollux_rejects_fixed_workloads(library):
    wl = WorkloadSpec((JobSpec("a", "cifar10", 0.0, "S", "tuned", 1, 128),), "tuned", 0)
    with pytest.raises(sim.SimulationError):
        sim.run(wl, library, sim.SimConfig(policy="pollux"))
    with pytest.raises(sim.SimulationError):
        sim.run(small_pollux_workload(library, 1), library, sim.SimConfig(policy="optimus"))


def test_wall_clock_guard(library):
    cfg = sim.SimConfig(policy="pollux", max_wall_seconds=0.0)
    with pytest.raises(sim.SimulationError, match="wall-clock"):
        sim.run(small_pollux_workload(library, 2), library, cfg)


# --- metrics and fairness -----------------------------------------------------------------


def record(job_id, submit, complete):
    return JobRecord(job_id, "S", "flat", submit, submit, complete, 0, 1.0, 1.0, 1.0, 1.0)


def test_summary_and_csv_schema():
    rep = MetricsReport((record("a", 0.0, 100.0), record("b", 50.0, 250.0)))
    s = rep.summary()
    assert s["avg_jct"] == 150.0 and s["makespan"] == 250.0 and s["max_rho"] is None
    rows = parse_metrics_csv(rep.to_csv())
    assert tuple(rows[0]) == CSV_COLUMNS and rows[1]["jct_s"] == "200.0"


def test_finish_time_fairness_examples():
    rep = MetricsReport((record("a", 0.0, 100.0),))
    assert finish_time_fairness(rep, {"a": 100.0}) == {"a": 1.0}
    assert finish_time_fairness(rep, {"a": 400.0})["a"] < 1.0
    with pytest.raises(MetricsError):
        finish_time_fairness(rep, {})


def test_single_job_fairness_is_one():
    wl = WorkloadSpec((fixed_job(gpus=4, batch=40),), "tuned", 0)
    cfg = sim.SimConfig(policy="tiresias", num_nodes=1)
    rep = run_with_fairness(wl, lib_of(flat_profile()), cfg)
    assert rep.records[0].rho == pytest.approx(1.0)


def test_rho_matches_independent_recomputation():
    prof = flat_profile(t=0.5)
    jobs = tuple(fixed_job(f"j{i}", submit=30.0 * i, gpus=1 + i % 2, batch=10 * (1 + i % 2)) for i in range(5))
    wl = WorkloadSpec(jobs, "tuned", 0)
    cfg = sim.SimConfig(policy="tiresias", num_nodes=1)
    lib = lib_of(prof)
    rep = run_with_fairness(wl, lib, cfg)
    rows = parse_metrics_csv(rep.to_csv())
    iso = isolated_jcts(wl, lib, cfg, sim.run(wl, lib, cfg))
    for row in rows:
        expect = (float(row["complete_s"]) - float(row["submit_s"])) / iso[row["job_id"]]
        assert float(row["rho"]) == pytest.approx(expect, rel=1e-5)


def test_partition_nodes():
    assert [n.resources["gpu"] for n in partition_nodes(10, 4)] == [4, 4, 2]


def test_mean_ci():
    m, h = mean_ci([1.0, 2.0, 3.0])
    assert m == 2.0 and h == pytest.approx(2.4842, rel=1e-3)
    assert mean_ci([5.0]) == (5.0, 0.0)
    with pytest.raises(MetricsError):
        mean_ci([])
    assert math.isfinite(mean_ci([1.0, 1.0])[1])
