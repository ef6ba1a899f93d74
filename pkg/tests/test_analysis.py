import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avrisk.analysis import (AnalysisError, FailureSet, RunSet, cluster_likelihoods, compare_rows,
                             event_frequency_ratio, intervals_overlap, kmeans_cluster, pca_project,
                             variance_ratio)
from avrisk.flow import FlowModel
from avrisk.naive import Estimate
from avrisk.objectives import GaussianLinear


def est(p, n=100, hits=None, gamma=-1.0, method="naive"):
    return Estimate(p_hat=p, std_err=0.0, ci_lo=p, ci_hi=p, n_evals=n, level=gamma, method=method,
                    n_hits=hits if hits is not None else int(round(p * n)), n_samples=n)


def runset(values, method="naive", n=100, gamma=-1.0):
    return RunSet(method, gamma, [est(v, n, gamma=gamma, method=method) for v in values])


def blobs(seed=0, per=50, dim=5, sep=10.0):
    rng = np.random.default_rng(seed)
    centres = np.zeros((4, dim))
    for j in range(4):
        centres[j, j] = sep
    truth = np.repeat(np.arange(4), per)
    pts = centres[truth] + rng.standard_normal((4 * per, dim))
    perm = rng.permutation(len(pts))
    return pts[perm], truth[perm]


def same_partition(a, b):
    pairs = set(zip(a.tolist(), b.tolist()))
    return len(pairs) == len(set(a.tolist())) == len(set(b.tolist()))


def test_variance_ratio_examples():
    a, b = runset([0.1, 0.3]), runset([0.1, 0.2])
    assert variance_ratio(a, b) == pytest.approx(4.0)
    assert variance_ratio(a, a) == 1.0
    assert variance_ratio(b, a) == pytest.approx(1 / variance_ratio(a, b))


@given(st.lists(st.floats(0, 1), min_size=2, max_size=10), st.lists(st.floats(0, 1), min_size=2, max_size=10))
def test_variance_ratio_antisymmetric(x, y):
    a, b = runset(x), runset(y)
    if a.variance() > 0 and b.variance() > 0:
        assert variance_ratio(a, b) * variance_ratio(b, a) == pytest.approx(1.0)


def test_pair_checks():
    with pytest.raises(AnalysisError):
        variance_ratio(runset([0.1, 0.2]), runset([0.1, 0.2], gamma=-2.0))
    with pytest.raises(AnalysisError):
        variance_ratio(runset([0.1, 0.2], n=100), runset([0.1, 0.2], n=200))
    with pytest.raises(AnalysisError):
        variance_ratio(runset([0.1]), runset([0.1, 0.2]))
    with pytest.raises(AnalysisError):
        RunSet("bogus", 0.0, [])
    with pytest.raises(AnalysisError):
        RunSet("naive", 0.0, [est(0.1, gamma=1.0)])
    # within the 5% tolerance is accepted
    assert variance_ratio(runset([0.1, 0.3], n=100), runset([0.1, 0.2], n=104)) == pytest.approx(4.0)


def test_naive_entitled_budget():
    rs = RunSet.naive_entitled(-1.0, [est(0.1, 10_000)], flow_samples=10_000, ams_cost=2500.5)
    assert rs.budget == 12_500.5


def test_event_frequency_ratio():
    a = RunSet("flow_is", -1.0, [est(0.1, 100, hits=50, method="flow_is")])
    b = RunSet("naive", -1.0, [est(0.01, 100, hits=1)])
    assert event_frequency_ratio(a, b) == pytest.approx(50.0)
    assert event_frequency_ratio(b, b) == 1.0
    zero = RunSet("naive", -1.0, [est(0.0, 100, hits=0)])
    assert event_frequency_ratio(a, zero) == math.inf


def test_interval_and_overlap():
    rs = runset([0.1, 0.2, 0.3])
    lo, hi = rs.interval()
    assert lo < 0.2 < hi and (hi - lo) / 2 == pytest.approx(1.959963984540054 * 0.1 / math.sqrt(3))
    assert intervals_overlap((0, 1), (1, 2)) and not intervals_overlap((0, 1), (1.1, 2))


def test_runset_json_round_trip():
    rs = runset([0.1, 0.2], method="ams")
    again = RunSet.from_json(rs.to_json())
    assert again.to_json() == rs.to_json()


def test_compare_rows():
    rows = compare_rows([runset([0.1, 0.3]), runset([0.1, 0.2], method="ams"), runset([0.5, 0.6], gamma=-2.0)])
    assert [(r["gamma"], r["method"]) for r in rows] == [(-2.0, "naive"), (-1.0, "naive"), (-1.0, "ams")]
    assert rows[2]["ratio"] == pytest.approx(4.0)
    assert math.isnan(rows[0]["ratio"])


def test_pca_rank_one():
    x = np.linspace(-3, 3, 40)
    pts = np.stack([x, np.full(40, 2.0), np.full(40, -1.0)], axis=1)
    pca = pca_project(FailureSet(pts), 1)
    assert pca.kept.tolist() == [0]
    assert pca.components[0].tolist() == [1.0]
    assert pca.explained[0] == pytest.approx(1.0)
    with pytest.raises(AnalysisError):
        pca_project(FailureSet(pts), 2)


def test_pca_isotropic_blob():
    pts = np.random.default_rng(0).standard_normal((10_000, 2))
    pca = pca_project(FailureSet(pts), 2)
    assert np.all(np.abs(pca.explained - 0.5) < 0.05)
    assert np.all(np.abs(pca.projected.mean(axis=0)) < 1e-10)


def test_pca_reconstruction_and_signs():
    pts, _ = blobs(1)
    pca = pca_project(FailureSet(pts), 5)
    assert np.max(np.abs(pca.reconstruct() - pca.standardize(pts))) <= 1e-8
    assert pca.explained.sum() <= 1 + 1e-12
    for row in pca.components:
        assert row[np.argmax(np.abs(row))] > 0


def test_kmeans_recovers_blobs():
    pts, truth = blobs(2)
    pca = pca_project(FailureSet(pts), 3)
    km = kmeans_cluster(pca.projected, 4, seed=0)
    assert same_partition(km.labels, truth)
    assert km.labels[0] == 0  # canonical labelling


def test_kmeans_single_cluster_is_mean():
    pts, _ = blobs(3)
    km = kmeans_cluster(pts, 1)
    assert np.allclose(km.centroids[0], pts.mean(axis=0), atol=1e-12)


def test_kmeans_duplicate_invariance_and_determinism():
    pts, _ = blobs(4)
    a = kmeans_cluster(pts, 4, seed=5)
    b = kmeans_cluster(np.concatenate([pts, pts]), 4, seed=5)
    key = lambda c: np.lexsort(c.T[::-1])
    assert np.allclose(a.centroids[key(a.centroids)], b.centroids[key(b.centroids)], atol=1e-9)
    c = kmeans_cluster(pts, 4, seed=5)
    assert np.array_equal(a.labels, c.labels) and a.inertia == c.inertia


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_kmeans_inertia_never_increases(seed):
    pts = np.random.default_rng(seed).standard_normal((60, 2))
    km = kmeans_cluster(pts, 3, seed=seed, restarts=3)
    assert all(b <= a + 1e-9 for a, b in zip(km.trace, km.trace[1:]))


def test_kmeans_degenerate():
    with pytest.raises(AnalysisError):
        kmeans_cluster(np.ones((10, 2)), 2)
    with pytest.raises(AnalysisError):
        kmeans_cluster(np.zeros((1, 2)), 2)


def test_cluster_likelihoods():
    flow = FlowModel.identity(2)
    r = 3.0
    latents = np.array([[0.0, 0.0]] * 3 + [[r, 0.0]] * 3)
    labels = np.array([0, 0, 0, 1, 1, 1])
    out = cluster_likelihoods(labels, flow, latents)
    gap = out["median_log_prob"][0] - out["median_log_prob"][1]
    assert gap == pytest.approx(r * r / 2, abs=1e-12)
    assert out["ratios"]["0/1"] == pytest.approx(math.exp(r * r / 2))
    single = cluster_likelihoods(np.zeros(3, int), flow, latents[:3])
    assert single["ratios"] == {} and len(single["median_log_prob"]) == 1
    with pytest.raises(AnalysisError):
        cluster_likelihoods(labels[:2], flow, latents)


def test_failure_set_verify():
    u = np.array([[-2.0, 0.0], [-3.0, 1.0]])
    fs = FailureSet(u, latents=u)
    fs.verify(GaussianLinear.axis(2), -1.0)
    with pytest.raises(AnalysisError):
        fs.verify(GaussianLinear.axis(2), -2.5)
    with pytest.raises(AnalysisError):
        FailureSet(u, feature_names=["a"])
    recs = [{"id": 0, "u": [1.0], "x": [2.0, 3.0], "f": -1.0}]
    fs = FailureSet.from_particles(recs, ["p", "q"])
    assert fs.points.tolist() == [[2.0, 3.0]] and fs.latents.tolist() == [[1.0]]
