"""Objective functions f, where low values are dangerous."""
from __future__ import annotations

import math

import numpy as np
from scipy import special

from avrisk.highway import SimConfig, simulate_batch


class Objective:
    """Black-box safety score evaluated on (latent, scenario) pairs."""

    kind = "abstract"

    def evaluate_batch(self, U: np.ndarray, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, u, x) -> float:
        u = np.asarray(u, dtype=float)
        x = np.asarray(x, dtype=float)
        return float(self.evaluate_batch(u[None, :], x[None, :])[0])

    def to_json(self) -> dict:
        return {"kind": self.kind}


def eval_gaussian_linear(a, u):
    a = np.asarray(a, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != a.shape[0]:
        raise ValueError(f"direction has {a.shape[0]} entries, latent has {u.shape[-1]}")
    # per-row reduction, identical for any batch shape
    return np.add.reduce(u * a, axis=-1)


class GaussianLinear(Objective):
    """f(u) = <a, u>; under the latent law this is N(0, |a|^2)."""

    kind = "gaussian_linear"

    def __init__(self, direction):
        self.direction = np.asarray(direction, dtype=float)
        if self.direction.ndim != 1 or not np.any(self.direction):
            raise ValueError("direction must be a nonzero vector")

    @classmethod
    def axis(cls, d: int, k: int = 0, scale: float = 1.0) -> "GaussianLinear":
        a = np.zeros(d)
        a[k] = scale
        return cls(a)

    def evaluate_batch(self, U, X):
        return eval_gaussian_linear(self.direction, U)

    def true_probability(self, gamma: float) -> float:
        return float(special.ndtr(gamma / np.linalg.norm(self.direction)))

    def to_json(self):
        return {"kind": self.kind, "direction": self.direction.tolist()}


def gaussian_tail(gamma: float) -> float:
    """Phi(gamma) from the error function."""
    return 0.5 * math.erfc(-gamma / math.sqrt(2.0))


class HighwayObjective(Objective):
    """Minimum TTC of a highway rollout of the scenario vector."""

    kind = "highway"

    def __init__(self, cfg: SimConfig | None = None):
        self.cfg = cfg or SimConfig()

    def evaluate_batch(self, U, X):
        return simulate_batch(X, self.cfg)[0]

    def to_json(self):
        from dataclasses import asdict
        return {"kind": self.kind, "sim": asdict(self.cfg)}


class ConstantObjective(Objective):
    kind = "constant"

    def __init__(self, value: float):
        self.value = float(value)

    def evaluate_batch(self, U, X):
        return np.full(np.shape(U)[0], self.value)

    def to_json(self):
        return {"kind": self.kind, "value": self.value}


class FirstCoordinate(Objective):
    """f(x) = x[0]; mirrors the shipped echo simulator."""

    kind = "first_coordinate"

    def evaluate_batch(self, U, X):
        return np.asarray(X, dtype=float)[:, 0].copy()


def objective_from_json(doc: dict) -> Objective:
    kind = doc.get("kind")
    if kind == "gaussian_linear":
        return GaussianLinear(doc["direction"])
    if kind == "highway":
        return HighwayObjective(SimConfig.from_dict(doc.get("sim", {})))
    if kind == "constant":
        return ConstantObjective(doc["value"])
    if kind == "first_coordinate":
        return FirstCoordinate()
    raise ValueError(f"unknown objective kind {kind!r}")
