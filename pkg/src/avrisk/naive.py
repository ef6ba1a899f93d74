"""Naive Monte Carlo: the baseline rare-event estimator."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

Z95 = 1.959963984540054
Z95_ONE_SIDED = 1.6448536269514722


@dataclass
class Estimate:
    """Point estimate with uncertainty; shared by every estimator."""

    p_hat: float
    std_err: float
    ci_lo: float
    ci_hi: float
    n_evals: int
    level: float
    method: str = "naive"
    n_hits: int = 0
    n_samples: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.ci_lo <= self.p_hat <= self.ci_hi <= 1.0):
            raise ValueError(f"inconsistent interval {self.ci_lo} <= {self.p_hat} <= {self.ci_hi}")
        if self.n_evals <= 0:
            raise ValueError("n_evals must be positive")

    @property
    def log_p_hat(self) -> float:
        return math.log(self.p_hat) if self.p_hat > 0 else -math.inf

    def to_json(self) -> dict:
        doc = asdict(self)
        lp = self.log_p_hat
        # JSON has no -inf; zero-hit runs report null
        doc["log_p_hat"] = lp if math.isfinite(lp) else None
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Estimate":
        doc = {k: v for k, v in doc.items() if k != "log_p_hat"}
        return cls(**doc)


def wilson_interval(hits: int, n: int, z: float = Z95) -> tuple[float, float]:
    """Wilson score interval; with zero hits the upper end is one-sided."""
    if n <= 0:
        raise ValueError("n must be positive")
    if hits == 0:
        z1 = Z95_ONE_SIDED if z == Z95 else z
        return 0.0, z1 * z1 / (n + z1 * z1)
    p = hits / n
    z2 = z * z
    centre = (p + z2 / (2 * n)) / (1 + z2 / n)
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / (1 + z2 / n)
    lo, hi = max(0.0, centre - half), min(1.0, centre + half)
    return min(lo, p), max(hi, p)


def naive_from_values(f: np.ndarray, gamma: float, n_evals: int | None = None) -> Estimate:
    n = len(f)
    hits = int(np.count_nonzero(np.asarray(f) < gamma))
    p = hits / n
    lo, hi = wilson_interval(hits, n)
    return Estimate(p_hat=p, std_err=math.sqrt(p * (1 - p) / n), ci_lo=lo, ci_hi=hi,
                    n_evals=n_evals or n, level=float(gamma), method="naive",
                    n_hits=hits, n_samples=n)


def estimate_naive(objective, space, n: int, gamma: float, pool, seed: int,
                   chunk: int = 50_000) -> Estimate:
    """Draw ``n`` scenarios from the base law and count those with f < gamma.

    Sampling happens in the caller in fixed-size chunks from one seeded
    stream, so the draws do not depend on how the pool splits work.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    before = pool.n_evals
    values = []
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        U, X = space.sample(rng, m)
        values.append(pool.evaluate(U, X))
    f = np.concatenate(values)
    return naive_from_values(f, gamma, pool.n_evals - before)


def required_samples(p: float, eps: float) -> int:
    """Samples for relative accuracy ``eps`` by the CLT: ceil((1-p) / (p eps^2))."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    # shave round-off so an exact integer bound is not bumped up by one
    return math.ceil((1.0 - p) / (p * eps * eps) * (1.0 - 1e-12))


def gaussian_cdf(x: float) -> float:
    return float(special.ndtr(x))
