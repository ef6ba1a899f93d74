import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import avrisk.ams as ams
from avrisk.ams import (AmsConfig, Particle, discard_count, mcmc_transition, next_level,
                        resample_discards, run_ams)
from avrisk.harness import make_pool
from avrisk.objectives import ConstantObjective, GaussianLinear, gaussian_tail
from avrisk.params import gaussian_space


def gaussian_run(gamma=-3.0, seed=0, n_workers=1, d=20, **kw):
    obj = GaussianLinear.axis(d)
    cfg = AmsConfig(gamma=gamma, seed=seed, **kw)
    return run_ams(obj, gaussian_space(d), cfg, make_pool(obj, n_workers))


def test_hand_trace_first_level():
    level, frac, keep = next_level(np.array([5.0, 4.0, 3.0, 2.0, 1.0]), np.arange(5), 0.2, 2.5)
    assert level == 4.0 and frac == 3 / 5
    assert keep.tolist() == [False, False, True, True, True]


def test_hand_trace_through_run_ams():
    obj = GaussianLinear.axis(1)
    init = np.array([[5.0], [4.0], [3.0], [2.0], [1.0]])
    cfg = AmsConfig(delta=0.2, gamma=2.5, n_particles=5, max_iters=1, seed=0)
    res = run_ams(obj, gaussian_space(1), cfg, make_pool(obj), initial=init)
    assert res.levels[0].L == 4.0 and res.levels[0].P_hat == 0.6


def test_ties_use_empirical_fraction():
    # two values tie at the cut; both sit at the level, so neither survives
    level, frac, _ = next_level(np.array([3.0, 3.0, 1.0, 0.0]), np.arange(4), 0.25, -10.0)
    assert level == 3.0 and frac == 0.5


def test_everything_already_failing():
    obj = GaussianLinear.axis(2)
    init = -5.0 - np.abs(np.random.default_rng(0).standard_normal((20, 2)))
    cfg = AmsConfig(gamma=0.0, n_particles=20)
    res = run_ams(obj, gaussian_space(2), cfg, make_pool(obj), initial=init)
    assert res.terminated == "converged" and len(res.levels) == 1
    assert res.levels[0].L == 0.0 and res.p_hat == 1.0
    assert res.n_evals == 20


def test_discard_count_rounding():
    assert discard_count(0.1, 30) == 3
    assert discard_count(0.1, 1000) == 100
    assert discard_count(0.2, 5) == 1
    assert discard_count(0.15, 10) == 2


def test_config_validation():
    with pytest.raises(ValueError):
        AmsConfig(delta=0.0)
    with pytest.raises(ValueError):
        AmsConfig(delta=0.99, n_particles=10)
    with pytest.raises(ValueError):
        AmsConfig(t_mcmc=0)


def test_converged_run_invariants(monkeypatch):
    seen_levels = []
    real = ams.next_level

    def spy(F, ids, delta, gamma):
        # every particle handed to the next iteration lies below the last level
        if seen_levels:
            assert np.all(F < seen_levels[-1])
        out = real(F, ids, delta, gamma)
        seen_levels.append(out[0])
        return out

    monkeypatch.setattr(ams, "next_level", spy)
    res = gaussian_run(gamma=-2.5, seed=4, n_particles=300, t_mcmc=5)
    assert res.terminated == "converged"
    L = [r.L for r in res.levels]
    assert all(a > b for a, b in zip(L, L[1:]))
    assert L[-1] == -2.5
    assert all(0 < r.P_hat <= 1 for r in res.levels)
    assert res.p_hat == pytest.approx(math.exp(sum(math.log(r.P_hat) for r in res.levels)), rel=1e-12)
    assert all(p.f < -2.5 for p in res.survivors)
    for p in res.survivors:
        assert p.f == p.u[0] and np.array_equal(p.x, p.u)


def test_beta_adaptation_stays_in_range():
    res = gaussian_run(gamma=-3.0, seed=1, n_particles=200)
    assert all(ams.BETA_RANGE[0] <= r.beta <= ams.BETA_RANGE[1] for r in res.levels)
    fixed = gaussian_run(gamma=-3.0, seed=1, n_particles=200, adapt_beta=False, beta=0.3)
    assert all(r.beta == 0.3 for r in fixed.levels)


def test_stall_on_constant_objective():
    obj = ConstantObjective(1.0)
    res = run_ams(obj, gaussian_space(2), AmsConfig(gamma=0.0, n_particles=50), make_pool(obj))
    assert res.terminated == "stalled"
    assert res.to_estimate().p_hat == 0.0


def test_max_iters():
    res = gaussian_run(gamma=-4.0, n_particles=100, max_iters=2)
    assert res.terminated == "max_iters" and len(res.levels) == 2


def test_reproducible_and_worker_invariant():
    a = gaussian_run(gamma=-2.0, seed=7, n_particles=200, n_workers=1)
    b = gaussian_run(gamma=-2.0, seed=7, n_particles=200, n_workers=8)
    assert a.to_json() == b.to_json()


def test_result_json_shapes():
    doc = gaussian_run(gamma=-2.0, n_particles=100).to_json()
    assert doc["levels"][-1]["acc_rate"] is None
    assert doc["estimate"]["method"] == "ams"
    assert 0 < doc["n_unique_survivors"] <= doc["n_survivors"]


def test_mcmc_beta_zero_keeps_point():
    obj = GaussianLinear.axis(3)
    sp = gaussian_space(3)
    u = np.array([-1.0, 0.5, 2.0])
    p = Particle(0, u, u.copy(), obj(u, u))
    q, acc = mcmc_transition(p, 0.0, obj, sp, 0.0, np.random.default_rng(0))
    assert acc and np.array_equal(q.u, u) and q.f == p.f


def test_mcmc_rejects_constraint_violation():
    obj = ConstantObjective(5.0)
    sp = gaussian_space(2)
    u = np.array([0.3, -0.2])
    p = Particle(3, u, u.copy(), 0.0)
    q, acc = mcmc_transition(p, 1.0, obj, sp, 0.5, np.random.default_rng(0))
    assert not acc and q is p


def test_kernel_invariance_without_constraint():
    obj = GaussianLinear.axis(3)
    sp = gaussian_space(3)
    rng = np.random.default_rng(2)
    p = Particle(0, np.zeros(3), np.zeros(3), 0.0)
    n = 100_000
    beta = 0.9
    chain = np.empty((n, 3))
    for i in range(n):
        p, acc = mcmc_transition(p, math.inf, obj, sp, beta, rng)
        assert acc
        chain[i] = p.u
    rho = math.sqrt(1 - beta * beta)
    # AR(1) inflation of the variance of the mean
    se_mean = math.sqrt((1 + rho) / (1 - rho) / n)
    se_var = math.sqrt(2 * (1 + rho**2) / (1 - rho**2) / n)
    assert np.all(np.abs(chain.mean(axis=0)) < min(0.02, 3 * se_mean))
    assert np.all(np.abs(chain.var(axis=0) - 1) < min(0.05, 3 * se_var))


def test_resample_examples():
    rng = np.random.default_rng(0)
    one = [Particle(9, np.array([1.0]), np.array([2.0]), -1.0)]
    out = resample_discards(one, 3, rng, next_id=100)
    assert [p.id for p in out] == [100, 101, 102]
    assert all(p.f == -1.0 and p.u[0] == 1.0 for p in out)
    out[0].u[0] = 7.0
    assert one[0].u[0] == 1.0  # copies, not views
    assert resample_discards(one, 0, rng) == []
    with pytest.raises(ValueError):
        resample_discards([], 1, rng)


def test_resample_uniform_frequencies():
    survivors = [Particle(i, np.array([float(i)]), np.array([float(i)]), 0.0) for i in range(10)]
    out = resample_discards(survivors, 100_000, np.random.default_rng(1))
    freq = np.bincount([int(p.u[0]) for p in out], minlength=10) / 100_000
    assert np.all(np.abs(freq - 0.1) < 0.01)


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=40), st.floats(0.05, 0.6), st.floats(-12, 12))
@settings(max_examples=200)
def test_next_level_properties(values, delta, gamma):
    F = np.array(values)
    if discard_count(delta, len(F)) >= len(F):
        return
    level, frac, keep = next_level(F, np.arange(len(F)), delta, gamma)
    assert level >= gamma
    assert frac == keep.mean()
    assert np.all(F[keep] < level)
    # at least ceil(delta N) particles are discarded unless gamma saturates
    if level > gamma:
        assert np.count_nonzero(~keep) >= discard_count(delta, len(F))


@pytest.mark.slow
def test_unbiased_over_200_runs():
    truth = gaussian_tail(-3.0)
    vals = np.array([gaussian_run(gamma=-3.0, seed=500 + s, n_particles=1000, t_mcmc=10).p_hat
                     for s in range(200)])
    assert abs(vals.mean() - truth) < 3 * vals.std(ddof=1) / math.sqrt(len(vals))
