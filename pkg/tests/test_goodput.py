import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from goodput_sched.goodput import (
    AllocationVector,
    BatchConfig,
    GoodputError,
    GoodputModel,
    LrScaleRule,
    ThroughputParams,
    efficiency,
    fixed_batch_config,
    goodput,
    optimize_batch_config,
    optimize_batch_table,
    scale_lr,
    t_grad,
    t_iter,
    t_sync,
    throughput,
    total_batch_size,
)

from . import oracles


def P(**kw):
    base = dict(alpha_grad=0.1, beta_grad=0.01)
    base.update(kw)
    return ThroughputParams(**base)


# --- hand-evaluated examples -------------------------------------------------------


def test_total_batch_size():
    assert total_batch_size((2, 2), BatchConfig(16, 1)) == 128
    assert total_batch_size((1,), BatchConfig(32)) == 32
    with pytest.raises(GoodputError):
        total_batch_size((0, 0), BatchConfig(8))


def test_t_grad():
    assert t_grad(P(), 10) == pytest.approx(0.2)
    assert t_grad(P(beta_grad=0.0), 1) == t_grad(P(beta_grad=0.0), 500)
    assert t_grad(P(alpha_grad=0.05, beta_grad=0.002), 128) == pytest.approx(0.306)


def test_t_sync_cases():
    p = P(alpha_sync_local=0.3, beta_sync_local=0.05, alpha_sync_node=0.5, beta_sync_node=0.1)
    assert t_sync(p, (1,)) == 0.0
    assert t_sync(p, (2, 0)) == pytest.approx(0.3)
    assert t_sync(p, (2, 2)) == pytest.approx(0.7)


def test_t_iter_examples():
    p = P(alpha_grad=0.2, beta_grad=0.0, alpha_sync_local=0.3, gamma=1.0)
    assert t_iter(p, (2,), BatchConfig(4)) == pytest.approx(0.5)
    assert t_iter(p, (2,), BatchConfig(4, 2)) == pytest.approx(0.9)
    q = P(alpha_grad=1.0, beta_grad=0.0, gamma=10.0)
    assert t_iter(q, (1,), BatchConfig(4)) == pytest.approx(1.0)


def test_throughput_examples():
    g = GoodputModel(P(alpha_grad=0.5, beta_grad=0.0), 0.0, 64, max_per_gpu_batch=128)
    assert throughput(g, (1,), BatchConfig(64)) == pytest.approx(128.0)
    assert throughput(g, (1,), BatchConfig(128)) == pytest.approx(2 * throughput(g, (1,), BatchConfig(64)))


def test_efficiency_examples():
    g = GoodputModel(P(), 1000.0, 100)
    assert efficiency(g, 100) == 1.0
    assert efficiency(g, 200) == pytest.approx(1100 / 1200)
    assert efficiency(GoodputModel(P(), 1e15, 100), 10_000) == pytest.approx(1.0)
    with pytest.raises(GoodputError, match="below initial batch size"):
        efficiency(g, 99)


def test_goodput_examples():
    # 200 examples per 200/128 s is 128 ex/s; efficiency 1100/1200.
    g = GoodputModel(P(alpha_grad=200 / 128, beta_grad=0.0), 1000.0, 100, max_per_gpu_batch=200)
    assert goodput(g, (1,), BatchConfig(200)) == pytest.approx(117.333, abs=1e-3)
    fixed = GoodputModel(g.params, 1000.0, 100, max_per_gpu_batch=200, non_adaptive=True)
    assert goodput(fixed, (1,), BatchConfig(200)) == throughput(fixed, (1,), BatchConfig(200))
    assert goodput(g, (1,), BatchConfig(100)) == throughput(g, (1,), BatchConfig(100))


def test_negative_pgns_clamped():
    assert GoodputModel(P(), -5.0, 10).pgns == 0.0


# --- batch optimization ------------------------------------------------------------


def test_non_adaptive_uses_initial_batch():
    g = GoodputModel(P(), 1e6, 128, max_batch=4096, max_per_gpu_batch=64, non_adaptive=True)
    cfg, _ = optimize_batch_config(g, (1, 1))
    assert total_batch_size((1, 1), cfg) == 128
    assert cfg == BatchConfig(64, 0)
    cfg, _ = optimize_batch_config(g, (1,))
    assert cfg == BatchConfig(64, 1)


def test_zero_noise_scale_keeps_initial_batch():
    g = GoodputModel(P(alpha_sync_local=0.2), 0.0, 32, max_batch=1024, max_per_gpu_batch=64)
    for a in [(1,), (2,), (4,)]:
        cfg, val = optimize_batch_config(g, a)
        ref = oracles.grid_best(g.params.to_dict(), 0.0, 32, 1024, 64, sum(a), False)
        assert val == pytest.approx(ref[0], rel=1e-12)
        assert total_batch_size(a, cfg) == 32 if sum(a) <= 32 else True


def test_memory_bound_single_gpu_never_accumulates():
    # Without synchronization, accumulation leaves throughput unchanged and
    # costs efficiency, so the exhaustive oracle keeps s = 0 on one GPU.
    g = GoodputModel(P(alpha_grad=0.01, beta_grad=0.01), 1e5, 32, max_batch=4096, max_per_gpu_batch=32)
    cfg, val = optimize_batch_config(g, (1,))
    ref = oracles.grid_best(g.params.to_dict(), 1e5, 32, 4096, 32, 1, False)
    assert val == pytest.approx(ref[0], rel=1e-12)
    assert (cfg.per_gpu_batch, cfg.accum_steps) == (ref[1], ref[2]) == (32, 0)


def test_accumulation_chosen_when_sync_dominates():
    g = GoodputModel(P(alpha_grad=0.01, beta_grad=0.01, alpha_sync_node=2.0), 1e5, 32, max_batch=4096, max_per_gpu_batch=32)
    cfg, val = optimize_batch_config(g, (2, 2))
    ref = oracles.grid_best(g.params.to_dict(), 1e5, 32, 4096, 32, 4, True)
    assert cfg.accum_steps > 0
    assert val == pytest.approx(ref[0], rel=1e-12)
    assert (cfg.per_gpu_batch, cfg.accum_steps) == (ref[1], ref[2])


def test_infeasible_batch():
    # M0 = 10000 cannot be reached with m <= 8 and s <= 15 on one GPU.
    g = GoodputModel(P(), 10.0, 10_000, max_per_gpu_batch=8)
    with pytest.raises(GoodputError, match="infeasible batch"):
        optimize_batch_config(g, (1,))
    table = optimize_batch_table(g, [1, 0], [False, False])
    assert table.goodput.tolist() == [0.0, 0.0]


def test_throughput_objective_ignores_efficiency():
    g = GoodputModel(P(alpha_sync_node=0.3), 10.0, 16, max_batch=2048, max_per_gpu_batch=64)
    _, thr = optimize_batch_config(g, (4, 4), objective="throughput")
    ref = oracles.grid_best(g.params.to_dict(), 10.0, 16, 2048, 64, 8, True, objective="throughput")
    assert thr == pytest.approx(ref[0], rel=1e-12)
    with pytest.raises(GoodputError):
        optimize_batch_config(g, (1,), objective="nope")


def test_fixed_batch_config():
    assert fixed_batch_config(256, 4, 64) == BatchConfig(64, 0)
    assert fixed_batch_config(256, 1, 64) == BatchConfig(64, 3)
    assert fixed_batch_config(100, 3, 64) == BatchConfig(34, 0)


# --- learning-rate scaling ------------------------------------------------------------


def test_scale_lr_rules():
    for kind in LrScaleRule.KINDS:
        assert scale_lr(LrScaleRule(kind, pgns=50.0), 32, 32) == pytest.approx(1.0)
    assert scale_lr(LrScaleRule("linear"), 32, 128) == 4
    assert scale_lr(LrScaleRule("square_root"), 32, 128) == 2
    with pytest.raises(GoodputError):
        scale_lr(LrScaleRule("adascale"), 32, 64)
    with pytest.raises(GoodputError):
        scale_lr(LrScaleRule("linear"), 64, 32)
    with pytest.raises(GoodputError):
        LrScaleRule("cubic")


# --- properties ------------------------------------------------------------------------

params_st = st.builds(
    ThroughputParams,
    alpha_grad=st.floats(1e-4, 1.0),
    beta_grad=st.floats(0.0, 0.05),
    alpha_sync_local=st.floats(0.0, 1.0),
    beta_sync_local=st.floats(0.0, 0.1),
    alpha_sync_node=st.floats(0.0, 2.0),
    beta_sync_node=st.floats(0.0, 0.2),
    gamma=st.floats(1.0, 10.0),
)


@st.composite
def models(draw):
    m0 = draw(st.integers(1, 256))
    max_m = draw(st.integers(1, 128))
    max_batch = draw(st.one_of(st.none(), st.integers(m0, 64 * m0)))
    phi = draw(st.one_of(st.floats(0.0, 1e5), st.just(0.0)))
    return GoodputModel(draw(params_st), phi, m0, max_batch, max_m, draw(st.booleans()))


@given(params_st, st.integers(1, 64), st.booleans(), st.integers(1, 512), st.integers(0, 14))
def test_t_iter_monotone_in_m_and_s(p, k, multi, m, s):
    a = [k] if not multi or k < 2 else [k - 1, 1]
    base = t_iter(p, a, BatchConfig(m, s))
    assert t_iter(p, a, BatchConfig(m + 1, s)) >= base
    assert t_iter(p, a, BatchConfig(m, s + 1)) >= base


@given(params_st, st.integers(2, 64), st.booleans(), st.integers(1, 512))
def test_overlap_bounds(p, k, multi, m):
    a = [k] if not multi else [k - 1, 1]
    tg, ts = t_grad(p, m), t_sync(p, a)
    ti = t_iter(p, a, BatchConfig(m))
    assert max(tg, ts) * (1 - 1e-12) <= ti <= (tg + ts) * (1 + 1e-12)


@given(st.floats(0.0, 1e6), st.integers(1, 1000), st.integers(1, 10_000))
def test_efficiency_strictly_decreasing(phi, m0, extra):
    g = GoodputModel(ThroughputParams(0.1, 0.0), phi, m0)
    e1, e2 = efficiency(g, m0 + extra), efficiency(g, m0 + extra + 1)
    assert 0 < e2 < e1 < 1


@given(models(), st.integers(1, 32), st.integers(1, 64), st.integers(0, 15))
def test_goodput_at_most_throughput(g, k, m, s):
    c = BatchConfig(m, s)
    M = k * m * (s + 1)
    if M < g.init_batch:
        return
    gp, thr = goodput(g, [k], c), throughput(g, [k], c)
    assert gp <= thr * (1 + 1e-12)
    if g.non_adaptive or M == g.init_batch:
        assert gp == pytest.approx(thr, rel=1e-12)
    elif g.pgns < 1e300:
        assert gp < thr


@given(models(), st.integers(1, 24), st.booleans())
def test_optimizer_matches_grid_oracle(g, k, multi):
    multi = multi and k > 1
    table = optimize_batch_table(g, [k], [multi])
    ref = oracles.grid_best(
        g.params.to_dict(), g.pgns, g.init_batch, g.max_batch, g.max_per_gpu_batch, k, multi, g.non_adaptive
    )
    if ref is None:
        assert table.goodput[0] == 0.0 and table.per_gpu_batch[0] == 0
        return
    assert table.goodput[0] == pytest.approx(ref[0], rel=1e-9)


@given(st.floats(0.0, 1e6), st.integers(1, 1000), st.integers(0, 100_000))
def test_adascale_gain_matches_efficiency(phi, m0, extra):
    M = m0 + extra
    gain = scale_lr(LrScaleRule("adascale", pgns=phi), m0, M)
    eff = efficiency(GoodputModel(ThroughputParams(0.1, 0.0), phi, m0), M)
    assert gain * m0 / M == pytest.approx(eff, rel=1e-12)


def test_allocation_vector_rejects_negative():
    with pytest.raises(GoodputError):
        AllocationVector((1, -1))
    assert AllocationVector.coerce(np.array([0, 2, 1])).num_nodes == 2
    assert math.isclose(GoodputModel(P(), 1.0, 4).max_per_gpu_batch, 4)
