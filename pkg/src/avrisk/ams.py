"""Adaptive multilevel splitting in the latent space of a parameter space.

Each iteration fixes the next level from the current population, counts
the fraction of particles strictly below it, discards every particle at or
above it, refills the population by resampling survivors, and moves each
clone with an autoregressive Gaussian MCMC kernel restricted to the level
set. The product of the surviving fractions estimates P(f < gamma).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from avrisk.naive import Estimate, Z95

CONVERGED = "converged"
STALLED = "stalled"
MAX_ITERS = "max_iters"

BETA_RANGE = (0.05, 0.99)


def discard_count(delta: float, n: int) -> int:
    # 0.1 * 30 is 3.0000000000000004 in floating point
    return math.ceil(delta * n - 1e-9)


@dataclass(frozen=True)
class AmsConfig:
    delta: float = 0.1
    t_mcmc: int = 10
    gamma: float = 0.0
    n_particles: int = 1000
    beta: float = 0.5
    adapt_beta: bool = True
    max_iters: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if discard_count(self.delta, self.n_particles) >= self.n_particles:
            raise ValueError("ceil(delta * N) must be smaller than N")
        if self.t_mcmc < 1 or self.max_iters < 1:
            raise ValueError("t_mcmc and max_iters must be >= 1")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")


@dataclass
class Particle:
    id: int
    u: np.ndarray
    x: np.ndarray
    f: float

    def to_json(self) -> dict:
        return {"id": int(self.id), "u": self.u.tolist(), "x": self.x.tolist(), "f": float(self.f)}

    @classmethod
    def from_json(cls, doc: dict) -> "Particle":
        return cls(int(doc["id"]), np.asarray(doc["u"], dtype=float),
                   np.asarray(doc["x"], dtype=float), float(doc["f"]))


@dataclass
class LevelRecord:
    k: int
    L: float
    P_hat: float
    acc_rate: float
    beta: float


@dataclass
class AmsResult:
    log_p: float
    levels: list
    survivors: list
    n_evals: int
    terminated: str
    gamma: float
    n_particles: int
    config: dict = field(default_factory=dict)

    @property
    def p_hat(self) -> float:
        return math.exp(self.log_p)

    def log_variance(self) -> float:
        """Asymptotic variance of log p_hat, treating levels as independent."""
        return sum((1.0 - r.P_hat) / (self.n_particles * r.P_hat) for r in self.levels)

    def to_estimate(self) -> Estimate:
        p = self.p_hat if self.terminated == CONVERGED else 0.0
        sd_log = math.sqrt(self.log_variance())
        lo = p * math.exp(-Z95 * sd_log)
        hi = min(1.0, p * math.exp(Z95 * sd_log))
        return Estimate(p_hat=p, std_err=p * sd_log, ci_lo=lo, ci_hi=max(hi, p),
                        n_evals=self.n_evals, level=self.gamma, method="ams",
                        n_hits=len(self.survivors), n_samples=self.n_evals,
                        extra={"terminated": self.terminated, "n_levels": len(self.levels)})

    def to_json(self) -> dict:
        return {
            "method": "ams",
            "gamma": self.gamma,
            "terminated": self.terminated,
            "p_hat": self.p_hat,
            "log_p": self.log_p,
            "n_evals": self.n_evals,
            "n_survivors": len(self.survivors),
            "n_unique_survivors": len({p.u.tobytes() for p in self.survivors}),
            "levels": [_level_json(r) for r in self.levels],
            "estimate": self.to_estimate().to_json(),
            "config": self.config,
        }


def _level_json(r: LevelRecord) -> dict:
    doc = asdict(r)
    # the final accumulation runs no MCMC
    if math.isnan(doc["acc_rate"]):
        doc["acc_rate"] = None
    return doc


def ar_proposal(U: np.ndarray, beta: float, Z: np.ndarray) -> np.ndarray:
    """sqrt(1 - beta^2) u + beta z; leaves N(0, I) invariant."""
    return math.sqrt(1.0 - beta * beta) * U + beta * Z


def mcmc_transition(p: Particle, level: float, objective, space, beta: float,
                    rng: np.random.Generator) -> tuple[Particle, bool]:
    """One constrained Metropolis step; the proposal is accepted iff f < level."""
    z = rng.standard_normal(p.u.shape)
    u_new = ar_proposal(p.u, beta, z)
    x_new = space.to_params(u_new)
    f_new = objective(u_new, x_new)
    if f_new < level:
        return Particle(p.id, u_new, x_new, f_new), True
    return p, False


def resample_indices(n_survivors: int, n_draw: int, rng: np.random.Generator) -> np.ndarray:
    if n_survivors < 1:
        raise ValueError("no survivors to resample from")
    if n_draw == 0:
        return np.empty(0, dtype=np.int64)
    return rng.integers(0, n_survivors, size=n_draw)


def resample_discards(survivors: list, n_discard: int, rng: np.random.Generator,
                      next_id: int = 0) -> list:
    """Draw ``n_discard`` copies uniformly with replacement, with fresh ids."""
    pick = resample_indices(len(survivors), n_discard, rng)
    return [Particle(next_id + k, survivors[i].u.copy(), survivors[i].x.copy(), survivors[i].f)
            for k, i in enumerate(pick)]


def next_level(F: np.ndarray, ids: np.ndarray, delta: float, gamma: float):
    """Level and surviving fraction for one iteration.

    Sorting is by f decreasing with ties broken by id. The level is the
    largest value left after removing the ceil(delta N) largest, floored at
    gamma; survivors are the particles strictly below it.
    """
    n = len(F)
    m = discard_count(delta, n)
    order = np.lexsort((ids, -F))
    level = max(gamma, float(F[order[m]]))
    keep = F < level
    return level, np.count_nonzero(keep) / n, keep


def run_ams(objective, space, cfg: AmsConfig, pool, initial=None) -> AmsResult:
    """Estimate P(f < gamma) by adaptive multilevel splitting.

    ``initial`` may supply the starting latents (N x d); otherwise they are
    drawn from the seeded stream.
    """
    rng = np.random.default_rng(cfg.seed)
    n, d, T = cfg.n_particles, space.latent_dim, cfg.t_mcmc
    before = pool.n_evals

    if initial is None:
        U = rng.standard_normal((n, d))
    else:
        U = np.array(initial, dtype=float)
        if U.shape != (n, d):
            raise ValueError(f"initial particles must have shape {(n, d)}")
    X = space.to_params(U)
    F = pool.evaluate(U, X)
    ids = np.arange(n)
    next_id = n

    beta = cfg.beta
    log_p = 0.0
    levels: list[LevelRecord] = []
    prev = math.inf
    status = MAX_ITERS
    final_keep = None

    for k in range(1, cfg.max_iters + 1):
        level, frac, keep = next_level(F, ids, cfg.delta, cfg.gamma)
        if frac == 0.0 or level >= prev:
            status = STALLED
            break
        log_p += math.log(frac)
        if level <= cfg.gamma:
            levels.append(LevelRecord(k, level, frac, math.nan, beta))
            status = CONVERGED
            final_keep = keep
            break

        slots = np.flatnonzero(~keep)
        surv = np.flatnonzero(keep)
        parents = surv[resample_indices(len(surv), len(slots), rng)]
        Ur, Xr, Fr = U[parents].copy(), X[parents].copy(), F[parents].copy()
        accepted = 0
        for _ in range(T):
            Z = rng.standard_normal(Ur.shape)
            Up = ar_proposal(Ur, beta, Z)
            Xp = space.to_params(Up)
            Fp = pool.evaluate(Up, Xp)
            ok = Fp < level
            accepted += int(np.count_nonzero(ok))
            Ur[ok], Xr[ok], Fr[ok] = Up[ok], Xp[ok], Fp[ok]
        acc = accepted / (len(slots) * T)
        levels.append(LevelRecord(k, level, frac, acc, beta))

        U[slots], X[slots], F[slots] = Ur, Xr, Fr
        ids[slots] = np.arange(next_id, next_id + len(slots))
        next_id += len(slots)
        prev = level

        if cfg.adapt_beta:
            if acc > 0.5:
                beta *= 1.1
            elif acc < 0.2:
                beta *= 0.9
            beta = min(max(beta, BETA_RANGE[0]), BETA_RANGE[1])

    if final_keep is None:
        final_keep = F < cfg.gamma
    survivors = [Particle(int(ids[i]), U[i].copy(), X[i].copy(), float(F[i]))
                 for i in np.flatnonzero(final_keep)]
    return AmsResult(log_p=log_p, levels=levels, survivors=survivors,
                     n_evals=pool.n_evals - before, terminated=status, gamma=cfg.gamma,
                     n_particles=n, config=asdict(cfg))
