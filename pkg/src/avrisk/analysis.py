"""Estimator comparisons and failure-mode discovery.

Run sets compare estimators at matched evaluation budgets. Failure sets are
standardized, projected with PCA, and clustered with k-means; clusters can be
ranked by their median log-likelihood under a trained flow.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from avrisk.naive import Z95, Estimate

log = logging.getLogger(__name__)

METHODS = ("naive", "ams", "flow_is")
BUDGET_TOLERANCE = 0.05


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run sets


@dataclass
class RunSet:
    method: str
    gamma: float
    estimates: list
    budget: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise AnalysisError(f"unknown method {self.method!r}")
        for e in self.estimates:
            if not math.isclose(e.level, self.gamma, rel_tol=0, abs_tol=1e-12):
                raise AnalysisError(f"estimate at level {e.level} in a run set for {self.gamma}")
        if not self.budget and self.estimates:
            self.budget = float(np.mean([e.n_evals for e in self.estimates]))

    @classmethod
    def naive_entitled(cls, gamma: float, estimates: list, flow_samples: int, ams_cost: float) -> "RunSet":
        """Naive run set whose budget is the flow's samples plus the AMS cost."""
        return cls("naive", gamma, estimates, budget=float(flow_samples + ams_cost))

    @property
    def values(self) -> np.ndarray:
        return np.array([e.p_hat for e in self.estimates])

    def mean(self) -> float:
        return float(self.values.mean())

    def variance(self) -> float:
        if len(self.estimates) < 2:
            raise AnalysisError("variance needs at least 2 runs")
        return float(self.values.var(ddof=1))

    def interval(self, z: float = Z95) -> tuple[float, float]:
        """Normal interval for the mean over runs."""
        half = z * math.sqrt(self.variance() / len(self.estimates))
        return self.mean() - half, self.mean() + half

    def hits(self) -> tuple[int, int]:
        return sum(e.n_hits for e in self.estimates), sum(e.n_samples or e.n_evals for e in self.estimates)

    def to_json(self) -> dict:
        return {"method": self.method, "gamma": self.gamma, "budget": self.budget,
                "estimates": [e.to_json() for e in self.estimates]}

    @classmethod
    def from_json(cls, doc: dict) -> "RunSet":
        return cls(doc["method"], float(doc["gamma"]), [Estimate.from_json(e) for e in doc["estimates"]],
                   float(doc.get("budget", 0.0)))


def _check_pair(a: RunSet, b: RunSet) -> None:
    if not math.isclose(a.gamma, b.gamma, rel_tol=0, abs_tol=1e-12):
        raise AnalysisError(f"run sets at different levels: {a.gamma} vs {b.gamma}")
    hi = max(a.budget, b.budget)
    if hi > 0 and abs(a.budget - b.budget) > BUDGET_TOLERANCE * hi:
        raise AnalysisError(f"budgets differ by more than {BUDGET_TOLERANCE:.0%}: {a.budget} vs {b.budget}")


def variance_ratio(a: RunSet, b: RunSet) -> float:
    """Sample variance of a's estimates over b's, at matched budgets."""
    _check_pair(a, b)
    va, vb = a.variance(), b.variance()
    if vb == 0.0:
        return math.inf if va > 0 else 1.0
    return va / vb


def event_frequency_ratio(a: RunSet, b: RunSet) -> float:
    """Hit rate of a over hit rate of b; +inf when b never hits."""
    _check_pair(a, b)
    ha, na = a.hits()
    hb, nb = b.hits()
    if hb == 0:
        log.warning("reference run set has no hits; ratio is +inf")
        return math.inf
    return (ha / na) / (hb / nb)


def intervals_overlap(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def compare_rows(runsets: list) -> list[dict]:
    """One row per run set; ratio is naive variance over this set's, when available."""
    naive = {rs.gamma: rs for rs in runsets if rs.method == "naive"}
    rows = []
    for rs in sorted(runsets, key=lambda r: (r.gamma, METHODS.index(r.method))):
        var = rs.variance() if len(rs.estimates) >= 2 else math.nan
        ratio = math.nan
        ref = naive.get(rs.gamma)
        if ref is not None and ref is not rs and len(ref.estimates) >= 2 and len(rs.estimates) >= 2:
            try:
                ratio = variance_ratio(ref, rs)
            except AnalysisError as exc:
                log.warning("no ratio for %s at %g: %s", rs.method, rs.gamma, exc)
        rows.append({"gamma": rs.gamma, "method": rs.method, "mean": rs.mean(), "variance": var,
                     "ratio": ratio, "runs": len(rs.estimates), "budget": rs.budget})
    return rows


# ---------------------------------------------------------------------------
# failure sets


@dataclass
class FailureSet:
    points: np.ndarray
    feature_names: list = field(default_factory=list)
    latents: np.ndarray | None = None
    values: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.points.shape[1])]
        if len(self.feature_names) != self.points.shape[1]:
            raise AnalysisError("feature_names do not match the point dimension")

    def verify(self, objective, gamma: float) -> None:
        """Re-evaluate every point and require f < gamma."""
        U = self.latents if self.latents is not None else self.points
        f = objective.evaluate_batch(U, self.points)
        bad = np.flatnonzero(~(f < gamma))
        if len(bad):
            raise AnalysisError(f"{len(bad)} points are not failures (first row {bad[0]})")

    @classmethod
    def from_particles(cls, records: list, feature_names=None) -> "FailureSet":
        return cls(np.array([r["x"] for r in records], dtype=float), list(feature_names or []),
                   np.array([r["u"] for r in records], dtype=float),
                   np.array([r["f"] for r in records], dtype=float))


@dataclass
class PcaResult:
    components: np.ndarray  # k x kept-columns, rows are directions
    projected: np.ndarray  # n x k
    explained: np.ndarray  # k fractions
    mean: np.ndarray
    scale: np.ndarray
    kept: np.ndarray  # indices of non-constant columns

    def standardize(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points)[:, self.kept] - self.mean) / self.scale

    def reconstruct(self) -> np.ndarray:
        """Standardized data rebuilt from the projection."""
        return self.projected @ self.components


def pca_project(fs: FailureSet, k: int = 2) -> PcaResult:
    X = fs.points
    n = X.shape[0]
    if not 1 <= k <= n:
        raise AnalysisError(f"need rows >= k >= 1 (rows={n}, k={k})")
    sd = X.std(axis=0)
    kept = np.flatnonzero(sd > 1e-12 * np.maximum(1.0, np.abs(X).max(axis=0)))
    dropped = [fs.feature_names[i] for i in range(X.shape[1]) if i not in set(kept)]
    if dropped:
        log.info("dropping constant columns: %s", ", ".join(dropped))
    if len(kept) == 0:
        raise AnalysisError("every column is constant")
    mean, scale = X[:, kept].mean(axis=0), sd[kept]
    Z = (X[:, kept] - mean) / scale
    _, s, vt = np.linalg.svd(Z, full_matrices=False)
    rank = int(np.sum(s > s[0] * max(Z.shape) * np.finfo(float).eps)) if s[0] > 0 else 0
    if k > rank:
        raise AnalysisError(f"k = {k} exceeds the rank {rank} of the standardized data")
    comps = vt[:k].copy()
    # largest-magnitude entry of each direction is positive
    idx = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(k), idx])[:, None]
    total = float(np.sum(s * s))
    return PcaResult(comps, Z @ comps.T, (s[:k] ** 2) / total, mean, scale, kept)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    trace: list  # inertia per iteration of the winning restart


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    centres = [X[rng.integers(n)]]
    d2 = np.sum((X - centres[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise AnalysisError("fewer distinct points than clusters")
        i = rng.choice(n, p=d2 / total)
        centres.append(X[i])
        d2 = np.minimum(d2, np.sum((X - X[i]) ** 2, axis=1))
    return np.array(centres)


def _lloyd(X, C, max_iter, tol):
    trace = []
    labels = None
    for _ in range(max_iter):
        d2 = np.sum((X[:, None, :] - C[None, :, :]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(len(X)), labels].sum())
        trace.append(inertia)
        newC = C.copy()
        for j in range(len(C)):
            members = X[labels == j]
            if len(members):
                newC[j] = members.mean(axis=0)
        if np.allclose(newC, C, rtol=0, atol=tol):
            C = newC
            break
        C = newC
    d2 = np.sum((X[:, None, :] - C[None, :, :]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(X)), labels].sum())
    if inertia < trace[-1]:
        trace.append(inertia)
    return labels, C, inertia, trace


def kmeans_cluster(points, k: int = 4, seed: int = 0, restarts: int = 20,
                   max_iter: int = 300, tol: float = 1e-10) -> KMeansResult:
    """k-means++ seeding, Lloyd iterations, best of ``restarts``."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    if X.shape[0] < k:
        raise AnalysisError(f"need at least k = {k} points")
    if len(np.unique(X, axis=0)) < k:
        raise AnalysisError("fewer distinct points than clusters")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        labels, C, inertia, trace = _lloyd(X, _kmeanspp(X, k, rng), max_iter, tol)
        if best is None or inertia < best.inertia:
            best = KMeansResult(labels, C, inertia, trace)
    # canonical labels: clusters numbered by first appearance, empty ones last
    first = [np.flatnonzero(best.labels == j) for j in range(k)]
    rank = sorted(range(k), key=lambda j: first[j][0] if len(first[j]) else len(X) + j)
    relabel = np.empty(k, dtype=int)
    relabel[rank] = np.arange(k)
    centroids = np.empty_like(best.centroids)
    centroids[relabel] = best.centroids
    return KMeansResult(relabel[best.labels], centroids, best.inertia, best.trace)


def cluster_likelihoods(labels, flow, latents) -> dict:
    """Median flow log-density per cluster, with ratios of exponentiated medians."""
    labels = np.asarray(labels)
    latents = np.atleast_2d(np.asarray(latents, dtype=float))
    if len(labels) != len(latents):
        raise AnalysisError("one latent per label required")
    lp = flow.log_prob(latents)
    medians = {}
    for c in np.unique(labels):
        sel = lp[labels == c]
        if len(sel) == 0:
            raise AnalysisError(f"cluster {c} is empty")
        medians[int(c)] = float(np.median(sel))
    ratios = {f"{a}/{b}": math.exp(medians[a] - medians[b])
              for a in medians for b in medians if a != b}
    return {"median_log_prob": medians, "ratios": ratios}
