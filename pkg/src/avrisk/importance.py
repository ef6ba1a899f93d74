"""Defensive importance sampling with a flow proposal.

Draws come from q = alpha * phi + (1 - alpha) * q_flow in latent space, so
every weight phi / q is bounded by 1 / alpha.
"""
from __future__ import annotations

import math
import warnings

import numpy as np

from avrisk.flow import FlowModel
from avrisk.naive import Z95, Estimate


def mixture_log_weights(log_phi: np.ndarray, log_q_flow: np.ndarray, alpha: float) -> np.ndarray:
    """log(phi / q) for the defensive mixture, computed without overflow."""
    r = log_q_flow - log_phi
    if alpha == 0.0:
        return -r
    if alpha == 1.0:
        return np.zeros_like(r)
    return -np.logaddexp(math.log(alpha), math.log1p(-alpha) + r)


def draw_mixture(model: FlowModel, rng: np.random.Generator, M: int, alpha: float) -> np.ndarray:
    """M latents; all component choices and base noise are drawn up front."""
    from_base = rng.random(M) < alpha
    Z = rng.standard_normal((M, model.dim))
    U = Z.copy()
    if not from_base.all():
        U[~from_base] = model.forward(Z[~from_base])
    return U


def is_estimate(model: FlowModel, space, objective, gamma: float, M: int, alpha: float,
                pool, seed: int, chunk: int = 50_000) -> Estimate:
    """Unbiased estimate of P(f < gamma) under the base law."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if M < 1:
        raise ValueError("M must be >= 1")
    if model.dim != space.latent_dim:
        raise ValueError(f"flow dimension {model.dim} != latent dimension {space.latent_dim}")
    if alpha == 1.0:
        warnings.warn("alpha = 1 ignores the flow; this is naive Monte Carlo", stacklevel=2)

    rng = np.random.default_rng(seed)
    U = draw_mixture(model, rng, M, alpha)
    before = pool.n_evals
    f = np.empty(M)
    logw = np.empty(M)
    for a in range(0, M, chunk):
        b = min(M, a + chunk)
        Uc = U[a:b]
        f[a:b] = pool.evaluate(Uc, space.to_params(Uc))
        logw[a:b] = mixture_log_weights(space.log_density_latent(Uc), model.log_prob(Uc), alpha)

    w = np.exp(logw)
    if alpha > 0 and np.any(w > 1.0 / alpha * (1 + 1e-12)):
        raise AssertionError("importance weight exceeds the defensive bound")
    hits = f < gamma
    y = np.where(hits, w, 0.0)
    p = float(np.mean(y))
    se = float(np.std(y, ddof=1) / math.sqrt(M)) if M > 1 else 0.0
    if hits.any():
        lo, hi = max(0.0, p - Z95 * se), min(1.0, p + Z95 * se)
    else:
        # no hits: bound by the largest weight any hit could carry
        wmax = 1.0 / alpha if alpha > 0 else float(w.max())
        lo, hi = 0.0, min(1.0, -math.log(0.05) / M * wmax)
    ess = float(w.sum() ** 2 / np.sum(w * w))
    return Estimate(p_hat=p, std_err=se, ci_lo=lo, ci_hi=max(hi, p), n_evals=pool.n_evals - before,
                    level=float(gamma), method="flow_is", n_hits=int(hits.sum()), n_samples=M,
                    extra={"alpha": alpha, "ess": ess, "max_weight": float(w.max()),
                           "hit_fraction": float(hits.mean())})
