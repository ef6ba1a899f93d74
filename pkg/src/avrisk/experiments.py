"""Experiment drivers shared by ``scripts/`` and the acceptance tests.

Each function is deterministic in its seed arguments and returns plain
results; printing and file output are left to callers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from avrisk.ams import AmsConfig, run_ams
from avrisk.analysis import (FailureSet, RunSet, event_frequency_ratio, intervals_overlap, kmeans_cluster,
                             pca_project, variance_ratio)
from avrisk.flow import TrainConfig, fit_flow
from avrisk.harness import make_pool
from avrisk.importance import is_estimate
from avrisk.naive import estimate_naive
from avrisk.objectives import GaussianLinear, gaussian_tail
from avrisk.params import gaussian_space


def gaussian_benchmark(d: int = 20):
    return gaussian_space(d), GaussianLinear.axis(d, 0)


def ams_runs(objective, space, gamma: float, n_runs: int, seed0: int = 0, **ams_kw) -> tuple[RunSet, list]:
    results = []
    for r in range(n_runs):
        cfg = AmsConfig(gamma=gamma, seed=seed0 + r, **ams_kw)
        results.append(run_ams(objective, space, cfg, make_pool(objective)))
    bad = [res.terminated for res in results if res.terminated != "converged"]
    if bad:
        raise RuntimeError(f"{len(bad)} AMS runs did not converge: {sorted(set(bad))}")
    return RunSet("ams", gamma, [res.to_estimate() for res in results]), results


def naive_runs(objective, space, gamma: float, n_runs: int, budget: int, seed0: int = 10_000,
               entitled: float | None = None) -> RunSet:
    ests = [estimate_naive(objective, space, budget, gamma, make_pool(objective), seed0 + r)
            for r in range(n_runs)]
    return RunSet("naive", gamma, ests, budget=float(entitled if entitled is not None else budget))


@dataclass
class RatioResult:
    gamma: float
    truth: float
    ams: RunSet
    naive: RunSet

    @property
    def ratio(self) -> float:
        return variance_ratio(self.naive, self.ams)


def variance_ratio_at(gamma: float, n_runs: int = 30, d: int = 20, seed0: int = 0, **ams_kw) -> RatioResult:
    """AMS against naive Monte Carlo granted AMS's mean evaluation count."""
    space, obj = gaussian_benchmark(d)
    ams, _ = ams_runs(obj, space, gamma, n_runs, seed0, **ams_kw)
    budget = int(round(ams.budget))
    naive = naive_runs(obj, space, gamma, n_runs, budget, seed0 + 10_000)
    return RatioResult(gamma, gaussian_tail(gamma), ams, naive)


@dataclass
class FlowIsResult:
    truth: float
    ams_cost: int
    n_train: int
    n_unique: int
    flow_is: RunSet
    naive: RunSet

    @property
    def hit_ratio(self) -> float:
        return event_frequency_ratio(self.flow_is, self.naive)

    @property
    def variance_ratio(self) -> float:
        return float(self.naive.variance() / self.flow_is.variance())

    @property
    def z_score(self) -> float:
        vals = self.flow_is.values
        return float((vals.mean() - self.truth) / (vals.std(ddof=1) / math.sqrt(len(vals))))


def flow_is_experiment(gamma: float = -3.0, M: int = 10_000, alpha: float = 0.1, n_reps: int = 20,
                       d: int = 20, seed: int = 0, ams_kw: dict | None = None,
                       train: TrainConfig | None = None) -> FlowIsResult:
    """AMS survivors -> flow -> defensive IS, against naive at M + AMS cost."""
    space, obj = gaussian_benchmark(d)
    kw = {"n_particles": 1000, "delta": 0.1, "t_mcmc": 3}
    kw.update(ams_kw or {})
    res = run_ams(obj, space, AmsConfig(gamma=gamma, seed=seed, **kw), make_pool(obj))
    if res.terminated != "converged":
        raise RuntimeError(f"AMS {res.terminated}")
    U = np.array([p.u for p in res.survivors])
    model = fit_flow(U, train or TrainConfig(seed=seed))
    ests = [is_estimate(model, space, obj, gamma, M, alpha, make_pool(obj), seed + 1000 + r)
            for r in range(n_reps)]
    # the IS run set is charged the AMS cost too, so budgets are comparable
    budget = M + res.n_evals
    flow_set = RunSet("flow_is", gamma, ests, budget=float(budget))
    naive = naive_runs(obj, space, gamma, n_reps, budget, seed + 2000)
    return FlowIsResult(gaussian_tail(gamma), res.n_evals, len(U), len(np.unique(U, axis=0)),
                        flow_set, naive)


@dataclass
class CrossCheck:
    gamma: float
    ams: RunSet
    naive: RunSet

    @property
    def overlap(self) -> bool:
        return intervals_overlap(self.ams.interval(), self.naive.interval())


def highway_crosscheck(config, gamma: float = 3.75, n_runs: int = 10, seed0: int = 0,
                       **ams_kw) -> CrossCheck:
    kw = {"n_particles": 200, "delta": 0.2, "t_mcmc": 5}
    kw.update(ams_kw)
    ams, _ = ams_runs(config.objective, config.space, gamma, n_runs, seed0, **kw)
    naive = naive_runs(config.objective, config.space, gamma, n_runs, int(round(ams.budget)), seed0 + 100)
    return CrossCheck(gamma, ams, naive)


def failure_modes(config, gamma: float, n_particles: int = 300, k: int = 4, seed: int = 0, **ams_kw):
    """AMS failures of a highway config, projected and clustered."""
    kw = {"delta": 0.2, "t_mcmc": 5}
    kw.update(ams_kw)
    res = run_ams(config.objective, config.space,
                  AmsConfig(gamma=gamma, n_particles=n_particles, seed=seed, **kw),
                  make_pool(config.objective))
    if res.terminated != "converged":
        raise RuntimeError(f"AMS {res.terminated}")
    fs = FailureSet.from_particles([p.to_json() for p in res.survivors], config.space.param_names)
    pca = pca_project(fs, 2)
    km = kmeans_cluster(pca.projected, k, seed=seed)
    return res, fs, pca, km
