import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import truncated_rounded_normal_mean
import rapsa.async_engine as ae
from rapsa.async_engine import (AsyncEvent, DelayModel, async_arapsa_update_pairs, async_block_update,
                                resolve_conflict, run_async_threads, simulate_async)
from rapsa.core import Constant, Diminishing, make_partition
from rapsa.engine import SyncConfig, run_sync
from rapsa.errors import ConfigurationError, DivergenceError, StallError
from rapsa.problems import LeastSquaresProblem, estimate_constants
from rapsa.quasi_newton import CurvatureMemory
from rapsa.theory import neighborhood_bound


@pytest.fixture
def quad8(rng):
    H = rng.standard_normal((50, 8)) + 2 * np.eye(50, 8)
    return LeastSquaresProblem(H, H @ rng.standard_normal(8) + 0.1 * rng.standard_normal(50))


def test_delay_clip_matches_truncated_normal():
    model = DelayModel(2.0, 0.3, 5)
    d = model.sample(np.random.default_rng(0), 100_000)
    assert d.min() >= 1 and d.max() <= 5
    se = d.std(ddof=1) / np.sqrt(d.size)
    assert abs(d.mean() - truncated_rounded_normal_mean(2.0, 0.3, 1, 5)) <= 4 * se


def test_delay_clip_both_ends():
    d = DelayModel(0.0, 3.0, 4).sample(np.random.default_rng(1), 50_000)
    assert set(np.unique(d)) == {1, 2, 3, 4}
    se = d.std(ddof=1) / np.sqrt(d.size)
    assert abs(d.mean() - truncated_rounded_normal_mean(0.0, 3.0, 1, 4)) <= 4 * se


def test_delay_model_validation():
    with pytest.raises(ConfigurationError):
        DelayModel(1.0, 0.1, 0)
    with pytest.raises(ConfigurationError):
        DelayModel(1.0, -0.1, 3)
    assert isinstance(DelayModel(1.0, 0.0, 3).sample(np.random.default_rng(0)), int)


@pytest.mark.parametrize("method", ["rapsa", "arapsa"])
def test_single_processor_unit_delay_equals_sync(quad8, method):
    cfg = SyncConfig(I=1, B=4, L=3, schedule=Diminishing(0.05, 20), T=150, seed=11, method=method, memory=4)
    a = simulate_async(quad8, cfg, DelayModel(1.0, 0.0, 10))
    s = run_sync(quad8, cfg)
    assert a.t == s.t
    assert a.gap == s.gap
    assert a.features == s.features
    np.testing.assert_array_equal(a.final, s.final)


@pytest.mark.parametrize("d", [2, 3])
def test_constant_delay_stretches_time(quad8, d):
    # one processor, fixed delay d: every d-th async iterate is the next sync iterate
    cfg = SyncConfig(I=1, B=4, L=2, schedule=Constant(0.02), T=40 * d, seed=4)
    a = simulate_async(quad8, cfg, DelayModel(float(d), 0.0, 10))
    s = run_sync(quad8, SyncConfig(I=1, B=4, L=2, schedule=Constant(0.02), T=40, seed=4))
    for k in range(41):
        assert a.objective[a.t.index(k * d)] == s.objective[k]
        assert a.features[a.t.index(k * d)] == s.features[k]
    assert a.meta["max_staleness"] == d


def test_simulation_is_replayable(quad8):
    cfg = SyncConfig(I=4, B=4, L=2, schedule=Constant(0.02), T=200, seed=9, record_every=10)
    model = DelayModel(2.0, 0.7, 6)
    a, b = simulate_async(quad8, cfg, model), simulate_async(quad8, cfg, model)
    assert a.gap == b.gap
    assert a.meta == b.meta


def test_commit_accounting(quad8):
    cfg = SyncConfig(I=4, B=4, L=2, schedule=Constant(0.01), T=300, seed=2, record_every=300)
    tr = simulate_async(quad8, cfg, DelayModel(1.0, 0.0, 3))
    # unit delays: all 4 writers land every tick; same-block writers collapse to one commit
    assert cfg.T < tr.meta["commits"] < 4 * cfg.T
    assert tr.meta["conflict_groups"] > 0
    assert tr.features[-1] == tr.meta["commits"] * 2
    assert tr.meta["max_staleness"] == 1


def test_resolve_conflict_frequencies():
    rng = np.random.default_rng(0)
    assert resolve_conflict(["only"], rng) == "only"
    with pytest.raises(ValueError):
        resolve_conflict([], rng)
    for C in (2, 3):
        n = 100_000
        counts = np.bincount([resolve_conflict(list(range(C)), rng) for _ in range(n)], minlength=C)
        se = np.sqrt((1 / C) * (1 - 1 / C) / n)
        assert np.all(np.abs(counts / n - 1 / C) <= 4 * se)


def test_async_block_expectation(quad8, rng):
    # averaging the stale block step over a uniform block choice gives -(gamma/B) grad f(x_read)
    B, gamma = 4, 0.1
    part = make_partition(8, B)
    x_read = rng.standard_normal(8)
    x_now = x_read + 0.05 * rng.standard_normal(8)
    batch = rng.integers(0, quad8.N, 3)
    steps = [async_block_update(quad8, x_now, x_read, part.slice(b), batch, gamma) - x_now for b in range(B)]
    g = quad8.batch_gradient(x_read, batch)
    np.testing.assert_allclose(np.mean(steps, axis=0), -(gamma / B) * g, rtol=1e-12, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 3))
def test_scalar_pair_curvature_independent_of_delay(x_read, step, scale):
    problem = LeastSquaresProblem([[scale]], [0.3])
    mem = CurvatureMemory(1, 3)
    x_committed = np.array([x_read - step])
    g = problem.block_gradient(np.array([x_read]), [0], slice(0, 1))
    admitted = async_arapsa_update_pairs(mem, [x_read], x_committed, g, problem, [0], slice(0, 1))
    if abs(step) > 1e-9:
        assert admitted
        v, r, _ = mem.pairs[-1]
        assert r[0] == pytest.approx(2 * scale * scale * v[0], rel=1e-9)


def test_pair_invariants_under_interference(rng):
    H = rng.standard_normal((200, 16)) + np.eye(200, 16)
    problem = LeastSquaresProblem(H, H @ rng.standard_normal(16) + 0.1 * rng.standard_normal(200))
    cfg = SyncConfig(I=4, B=4, L=5, schedule=Constant(0.01), T=7000, seed=3, method="arapsa",
                     memory=5, record_every=7000)
    seen = []
    original = ae.async_arapsa_update_pairs

    def checked(memory, *args, **kwargs):
        ok = original(memory, *args, **kwargs)
        seen.append(ok)
        assert len(memory) <= memory.capacity
        assert memory.eta > 0
        for v, r, rho in memory.pairs:
            assert v @ r > 0 and rho == pytest.approx(1 / (v @ r))
        return ok

    ae.async_arapsa_update_pairs = checked
    try:
        tr = simulate_async(problem, cfg, DelayModel(2.0, 1.0, 5))
    finally:
        ae.async_arapsa_update_pairs = original
    assert len(seen) >= 10_000 and len(seen) == tr.meta["commits"]
    assert tr.gap[-1] < tr.gap[0]


def test_async_arapsa_needs_memory(quad8):
    cfg = SyncConfig(I=1, B=2, L=1, schedule=Constant(0.01), T=5, method="rapsa", memory=0)
    cfg.method = "arapsa"
    with pytest.raises(ConfigurationError):
        simulate_async(quad8, cfg, DelayModel(1, 0, 2))


def test_simulated_divergence(quad8):
    cfg = SyncConfig(I=2, B=2, L=1, schedule=Constant(50.0), T=500, seed=0)
    with pytest.raises(DivergenceError):
        simulate_async(quad8, cfg, DelayModel(2.0, 0.5, 4))


def test_threads_single_worker_reaches_neighborhood(replica):
    gamma = 1e-2
    cfg = SyncConfig(I=1, B=8, L=10, schedule=Constant(gamma), T=4000, seed=0, record_every=400)
    tr = run_async_threads(replica, cfg, stall_timeout=120)
    m, M, K = estimate_constants(replica, batch_size=10)
    assert tr.t[-1] == cfg.T
    assert tr.meta["commits"] == cfg.T and tr.meta["conflict_groups"] == 0
    assert np.mean(tr.gap[-3:]) <= 3 * neighborhood_bound(gamma, m, M, K)


def test_threads_many_workers_count_commits(quad8):
    cfg = SyncConfig(I=4, B=4, L=2, schedule=Constant(0.01), T=600, seed=1, record_every=100)
    tr = run_async_threads(quad8, cfg)
    assert tr.t == [0, 100, 200, 300, 400, 500, 600]
    assert tr.meta["commits"] == 600
    assert tr.gap[-1] < tr.gap[0]


def test_threads_arapsa_runs(quad8):
    cfg = SyncConfig(I=2, B=4, L=4, schedule=Constant(0.01), T=400, seed=1, method="arapsa",
                     memory=3, record_every=200)
    tr = run_async_threads(quad8, cfg)
    assert tr.gap[-1] < tr.gap[0]


class _Slow(LeastSquaresProblem):
    def block_gradient(self, x, batch, sl):
        time.sleep(1.0)
        return super().block_gradient(x, batch, sl)


def test_threads_stall_detected(quad8):
    slow = _Slow(quad8.H, quad8.z)
    cfg = SyncConfig(I=1, B=2, L=1, schedule=Constant(0.01), T=5, seed=0)
    with pytest.raises(StallError):
        run_async_threads(slow, cfg, f_star=0.0, stall_timeout=0.2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_threads_divergence(quad8):
    cfg = SyncConfig(I=2, B=2, L=1, schedule=Constant(50.0), T=2000, seed=0, record_every=10)
    with pytest.raises(DivergenceError):
        run_async_threads(quad8, cfg)


def test_event_record():
    ev = AsyncEvent(0, 3, 5, 1, np.array([2]), np.zeros(2))
    assert ev.write_time - ev.read_time == 2 and ev.grad is None
