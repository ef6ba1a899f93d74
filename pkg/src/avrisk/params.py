"""Structured base distribution over scenario parameters.

Every stochastic coordinate is driven by standard-normal latents: a latent is
pushed to a uniform through the normal CDF and then through the quantile of
the coordinate's law. Estimators work on the latent vector, whose density is
an exact product of standard normals, and treat the scenario vector as a
deterministic pushforward.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class SpaceError(ValueError):
    """Raised for malformed parameter-space declarations or inputs."""


# ---------------------------------------------------------------------------
# Beta quantile


def beta_cdf(x, a: float, b: float):
    x = np.asarray(x, dtype=float)
    if a == 2.0 and b == 2.0:
        return x * x * (3.0 - 2.0 * x)
    return special.betainc(a, b, x)


def _beta_pdf(x, a: float, b: float):
    if a == 2.0 and b == 2.0:
        return 6.0 * x * (1.0 - x)
    log_norm = special.betaln(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.exp((a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - log_norm)


def _beta_start(p, a: float, b: float):
    """Best of the mean and the two tail asymptotics, by CDF residual.

    Near 0 the CDF behaves like x^a / (a B(a, b)), near 1 like one minus the
    mirrored term; steep tails (shape < 1) defeat a start at the mean.
    """
    log_ab = special.betaln(a, b)
    with np.errstate(divide="ignore", over="ignore", under="ignore"):
        x_lo = np.exp((np.log(p) + math.log(a) + log_ab) / a)
        x_hi = -np.expm1((np.log1p(-p) + math.log(b) + log_ab) / b)
    cands = np.clip(np.stack([np.full_like(p, a / (a + b)), x_lo, x_hi]), 0.0, 1.0)
    resid = np.abs(beta_cdf(cands, a, b) - p)
    return cands[np.argmin(resid, axis=0), np.arange(len(p))]


def beta_quantile(p, a: float = 2.0, b: float = 2.0, tol: float = 1e-13, max_iter: int = 200):
    """Inverse of the regularized incomplete beta function.

    Safeguarded Newton: each step is kept inside the current bracket and
    replaced by bisection when it would leave it. Elements converge
    independently, so the result for one entry does not depend on what else
    is in the batch.

    Parameters
    ----------
    p : float or array_like
        Probabilities in [0, 1].
    a, b : float
        Shape parameters, both positive.

    Returns
    -------
    float or ndarray
        ``x`` with ``beta_cdf(x, a, b)`` equal to ``p`` within ``tol`` (or a
        bracket collapsed to round-off).
    """
    if a <= 0 or b <= 0:
        raise SpaceError(f"beta shapes must be positive, got ({a}, {b})")
    scalar = np.ndim(p) == 0
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise SpaceError("beta_quantile requires p in [0, 1]")

    x = np.where(p <= 0.0, 0.0, np.where(p >= 1.0, 1.0, 0.5))
    lo = np.zeros_like(p)
    hi = np.ones_like(p)
    active = (p > 0.0) & (p < 1.0)
    x[active] = _beta_start(p[active], a, b)

    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        xa = x[idx]
        resid = beta_cdf(xa, a, b) - p[idx]
        converged = np.abs(resid) <= tol
        # shrink bracket
        lo[idx] = np.where(resid < 0, xa, lo[idx])
        hi[idx] = np.where(resid > 0, xa, hi[idx])
        collapsed = ~converged & (hi[idx] <= np.nextafter(lo[idx], np.inf))
        if collapsed.any():
            # no representable x hits p: take the bracket end nearest in CDF
            c = idx[collapsed]
            r_lo = np.abs(beta_cdf(lo[c], a, b) - p[c])
            r_hi = np.abs(beta_cdf(hi[c], a, b) - p[c])
            xa[collapsed] = np.where(r_lo <= r_hi, lo[c], hi[c])
        done = converged | collapsed
        dens = _beta_pdf(xa, a, b)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = xa - resid / dens
        bad = ~np.isfinite(step) | (step <= lo[idx]) | (step >= hi[idx])
        step = np.where(bad, 0.5 * (lo[idx] + hi[idx]), step)
        x[idx] = np.where(done, xa, step)
        active[idx[done]] = False
    else:
        if active.any():
            raise RuntimeError("beta_quantile failed to converge")
    return float(x[0]) if scalar else x


# ---------------------------------------------------------------------------
# Coordinate laws


@dataclass(frozen=True)
class UniformScaled:
    name: str
    lo: float
    hi: float

    n_latent = 1

    def __post_init__(self):
        if not self.lo < self.hi:
            raise SpaceError(f"{self.name}: UniformScaled requires lo < hi")

    @property
    def n_params(self) -> int:
        return 1

    def names(self) -> list[str]:
        return [self.name]

    def transform(self, u: np.ndarray) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * special.ndtr(u)

    def bounds(self):
        return [(self.lo, self.hi)]

    def to_json(self) -> dict:
        return {"name": self.name, "law": "UniformScaled", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class BetaScaled:
    """``scale * Beta(alpha, beta) + offset``."""

    name: str
    alpha: float
    beta: float
    scale: float
    offset: float = 0.0

    n_latent = 1

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise SpaceError(f"{self.name}: Beta shapes must be positive")
        if self.scale == 0:
            raise SpaceError(f"{self.name}: Beta scale must be nonzero")

    @property
    def n_params(self) -> int:
        return 1

    def names(self) -> list[str]:
        return [self.name]

    def transform(self, u: np.ndarray) -> np.ndarray:
        q = beta_quantile(special.ndtr(u[:, 0]), self.alpha, self.beta)
        return (self.scale * q + self.offset)[:, None]

    def bounds(self):
        ends = sorted([self.offset, self.offset + self.scale])
        return [tuple(ends)]

    def to_json(self) -> dict:
        return {"name": self.name, "law": "BetaScaled", "alpha": self.alpha,
                "beta": self.beta, "scale": self.scale, "offset": self.offset}


@dataclass(frozen=True)
class NormalMV:
    """Multivariate normal; ``std`` gives a diagonal covariance shortcut."""

    name: str
    mean: tuple
    cov: tuple | None = None
    std: tuple | None = None
    _chol: np.ndarray | None = field(default=None, compare=False, repr=False)
    _diag: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        if mean.ndim != 1 or mean.size == 0:
            raise SpaceError(f"{self.name}: mean must be a non-empty vector")
        if (self.cov is None) == (self.std is None):
            raise SpaceError(f"{self.name}: give exactly one of cov or std")
        if self.std is not None:
            diag = np.asarray(self.std, dtype=float)
            if diag.shape != mean.shape or np.any(diag <= 0):
                raise SpaceError(f"{self.name}: std must be positive with the mean's shape")
            chol = None
        else:
            cov = np.asarray(self.cov, dtype=float)
            if cov.shape != (mean.size, mean.size) or not np.allclose(cov, cov.T):
                raise SpaceError(f"{self.name}: covariance must be symmetric d x d")
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise SpaceError(f"{self.name}: covariance not positive definite") from exc
            diag = None
            if np.count_nonzero(chol - np.diag(np.diag(chol))) == 0:
                diag, chol = np.diag(chol).copy(), None
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_diag", diag)

    @property
    def n_latent(self) -> int:
        return len(self.mean)

    @property
    def n_params(self) -> int:
        return len(self.mean)

    def names(self) -> list[str]:
        return [f"{self.name}_{i}" for i in range(self.n_params)]

    def transform(self, u: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=float)
        if self._chol is None:
            return mean + self._diag * u
        # column-by-column accumulation keeps each row independent of batch shape
        out = np.broadcast_to(mean, u.shape).copy()
        for j in range(u.shape[1]):
            out[:, j:] += u[:, j:j + 1] * self._chol[j:, j]
        return out

    def bounds(self):
        return [(-math.inf, math.inf)] * self.n_params

    def to_json(self) -> dict:
        doc = {"name": self.name, "law": "NormalMV", "mean": list(self.mean)}
        if self.cov is not None:
            doc["cov"] = [list(r) for r in self.cov]
        else:
            doc["std"] = list(self.std)
        return doc


@dataclass(frozen=True)
class MixtureIndicator:
    """Two-branch affine mixture of a Beta base variable.

    Consumes two latents: the base value and the branch switch. The switch's
    uniform below ``threshold`` selects branch a.
    """

    name: str
    branch_a: tuple  # (scale, offset)
    branch_b: tuple
    threshold: float = 0.5
    base_alpha: float = 2.0
    base_beta: float = 2.0

    n_latent = 2

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise SpaceError(f"{self.name}: switch threshold must lie in (0, 1)")
        if self.base_alpha <= 0 or self.base_beta <= 0:
            raise SpaceError(f"{self.name}: Beta shapes must be positive")

    @property
    def n_params(self) -> int:
        return 1

    def names(self) -> list[str]:
        return [self.name]

    def transform(self, u: np.ndarray) -> np.ndarray:
        base = beta_quantile(special.ndtr(u[:, 0]), self.base_alpha, self.base_beta)
        switch = special.ndtr(u[:, 1])
        sa, oa = self.branch_a
        sb, ob = self.branch_b
        out = np.where(switch < self.threshold, sa * base + oa, sb * base + ob)
        return out[:, None]

    def bounds(self):
        ends = [self.branch_a[1], self.branch_a[0] + self.branch_a[1],
                self.branch_b[1], self.branch_b[0] + self.branch_b[1]]
        return [(min(ends), max(ends))]

    def to_json(self) -> dict:
        return {"name": self.name, "law": "MixtureIndicator", "branch_a": list(self.branch_a),
                "branch_b": list(self.branch_b), "threshold": self.threshold,
                "base_alpha": self.base_alpha, "base_beta": self.base_beta}


def _gated_copy(src: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(src >= threshold, src, 0.0)


FORMULAS = {"gated_copy": _gated_copy}


@dataclass(frozen=True)
class DeterministicFn:
    """Scalar function of an earlier scalar coordinate; no latents."""

    name: str
    source: str
    formula: str
    threshold: float = 0.0

    n_latent = 0

    def __post_init__(self):
        if self.formula not in FORMULAS:
            raise SpaceError(f"{self.name}: unknown formula {self.formula!r}")

    @property
    def n_params(self) -> int:
        return 1

    def names(self) -> list[str]:
        return [self.name]

    def apply(self, src: np.ndarray) -> np.ndarray:
        return FORMULAS[self.formula](src, self.threshold)

    def bounds(self):
        return [(-math.inf, math.inf)]

    def to_json(self) -> dict:
        return {"name": self.name, "law": "DeterministicFn", "source": self.source,
                "formula": self.formula, "threshold": self.threshold}


LAWS = {
    "UniformScaled": UniformScaled,
    "BetaScaled": BetaScaled,
    "NormalMV": NormalMV,
    "MixtureIndicator": MixtureIndicator,
    "DeterministicFn": DeterministicFn,
}


def coord_from_json(doc: dict):
    doc = dict(doc)
    law = doc.pop("law", None)
    if law not in LAWS:
        raise SpaceError(f"unknown law {law!r} for coordinate {doc.get('name')!r}")
    for key in ("branch_a", "branch_b", "mean", "std"):
        if key in doc:
            doc[key] = tuple(doc[key])
    if "cov" in doc:
        doc["cov"] = tuple(tuple(r) for r in doc["cov"])
    try:
        return LAWS[law](**doc)
    except TypeError as exc:
        raise SpaceError(f"bad fields for {law}: {exc}") from exc


# ---------------------------------------------------------------------------
# Parameter space


class ParamSpace:
    """Ordered list of coordinates with a standard-normal latent representation."""

    def __init__(self, coords: Sequence):
        self.coords = tuple(coords)
        seen: dict[str, int] = {}
        lat, par = 0, 0
        self._lat_slices = []
        self._par_slices = []
        for c in self.coords:
            if c.name in seen:
                raise SpaceError(f"duplicate coordinate name {c.name!r}")
            if isinstance(c, DeterministicFn):
                src = seen.get(c.source)
                if src is None:
                    raise SpaceError(f"{c.name}: source {c.source!r} must be declared earlier")
                if self.coords[src].n_params != 1:
                    raise SpaceError(f"{c.name}: source must be scalar")
            seen[c.name] = len(self._lat_slices)
            self._lat_slices.append(slice(lat, lat + c.n_latent))
            self._par_slices.append(slice(par, par + c.n_params))
            lat += c.n_latent
            par += c.n_params
        self._index = seen
        self.latent_dim = lat
        self.param_dim = par

    def __repr__(self):
        return f"ParamSpace(latent_dim={self.latent_dim}, param_dim={self.param_dim})"

    @property
    def param_names(self) -> list[str]:
        return [n for c in self.coords for n in c.names()]

    def param_slice(self, name: str) -> slice:
        return self._par_slices[self._index[name]]

    def bounds(self) -> list[tuple[float, float]]:
        return [b for c in self.coords for b in c.bounds()]

    def to_params(self, u) -> np.ndarray:
        """Map latents (1-D point or 2-D batch) to scenario parameters."""
        u = np.asarray(u, dtype=float)
        single = u.ndim == 1
        U = u[None, :] if single else u
        if U.ndim != 2 or U.shape[1] != self.latent_dim:
            raise SpaceError(f"latent dimension {U.shape[-1]} != {self.latent_dim}")
        X = np.empty((U.shape[0], self.param_dim))
        deferred = []
        for c, ls, ps in zip(self.coords, self._lat_slices, self._par_slices):
            if isinstance(c, DeterministicFn):
                deferred.append((c, ps))
                continue
            X[:, ps] = c.transform(U[:, ls])
        for c, ps in deferred:
            src = self.param_slice(c.source)
            X[:, ps] = c.apply(X[:, src.start])[:, None]
        return X[0] if single else X

    def sample(self, rng: np.random.Generator, n: int | None = None):
        """Draw latents i.i.d. N(0, 1) and map them; returns ``(u, x)``."""
        shape = (self.latent_dim,) if n is None else (n, self.latent_dim)
        u = rng.standard_normal(shape)
        return u, self.to_params(u)

    def log_density_latent(self, u) -> np.ndarray | float:
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.latent_dim:
            raise SpaceError(f"latent dimension {u.shape[-1]} != {self.latent_dim}")
        return std_normal_logpdf(u)

    def to_json(self) -> list[dict]:
        return [c.to_json() for c in self.coords]

    @classmethod
    def from_json(cls, docs: list[dict]) -> "ParamSpace":
        return cls([coord_from_json(d) for d in docs])


def std_normal_logpdf(u: np.ndarray):
    """Sum of standard-normal log densities over the last axis."""
    u = np.asarray(u, dtype=float)
    d = u.shape[-1]
    return -0.5 * np.sum(u * u, axis=-1) - d * LOG_SQRT_2PI


# ---------------------------------------------------------------------------
# Stock spaces

WEATHER_NAMES = ("P_g", "A", "C", "P_a")


def weather_coords() -> list:
    return [
        UniformScaled("P_g", 0.0, 50.0),
        UniformScaled("A", 0.0, 90.0),
        MixtureIndicator("C", branch_a=(30.0, 0.0), branch_b=(40.0, 60.0), threshold=0.5),
        DeterministicFn("P_a", source="C", formula="gated_copy", threshold=70.0),
    ]


def vehicle_coords(n_vehicles: int) -> list:
    out = []
    for i in range(n_vehicles):
        out += [
            BetaScaled(f"S_{i}", 2.0, 2.0, 500.0, 200.0),
            BetaScaled(f"T_{i}", 2.0, 2.0, 0.5, -0.25),
            BetaScaled(f"V_{i}", 2.0, 2.0, 10.0, 15.0),
        ]
    return out


# Nominal behaviour weights read by the built-in environment controller,
# see highway.BEHAVIOR_FIELDS.
BEHAVIOR_MEAN = (0.0, 0.4, 0.6, 0.8, 0.0, -0.4, 0.0, 0.0)
BEHAVIOR_STD = (0.3, 0.1, 0.15, 0.2, 0.15, 0.1, 0.04, 1.5)


def behavior_coord(dim: int = 8) -> NormalMV:
    if dim < len(BEHAVIOR_MEAN):
        raise SpaceError(f"behaviour vector needs at least {len(BEHAVIOR_MEAN)} entries")
    extra = dim - len(BEHAVIOR_MEAN)
    return NormalMV("xi", mean=BEHAVIOR_MEAN + (0.0,) * extra,
                    std=BEHAVIOR_STD + (0.1,) * extra)


def highway_space(n_vehicles: int = 6, behavior_dim: int = 8) -> ParamSpace:
    return ParamSpace(weather_coords() + vehicle_coords(n_vehicles) + [behavior_coord(behavior_dim)])


def full_space() -> ParamSpace:
    """Weather, six vehicles' pose/velocity and a 404-weight behaviour vector."""
    return highway_space(6, 404)


def desk_space() -> ParamSpace:
    return highway_space(6, 8)


def gaussian_space(d: int) -> ParamSpace:
    return ParamSpace([NormalMV("u", mean=(0.0,) * d, std=(1.0,) * d)])


def load_space(path: str | Path) -> ParamSpace:
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict):
        doc = doc["coords"]
    return ParamSpace.from_json(doc)
