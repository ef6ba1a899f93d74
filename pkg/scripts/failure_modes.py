"""Failure-mode discovery on the desk highway config.

Runs AMS to a rare TTC level, fits a flow to the survivors, projects the
failure scenarios with PCA, clusters them, and reports which scenario
features load on each component and each cluster's median flow likelihood.

    python scripts/failure_modes.py --gamma 1.0 --n 300
"""
import argparse
import json
from pathlib import Path

import numpy as np

from avrisk.analysis import cluster_likelihoods
from avrisk.config import load_config
from avrisk.experiments import failure_modes
from avrisk.flow import TrainConfig, fit_flow

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.json"))
    ap.add_argument("--gamma", type=float, default=1.0)
    ap.add_argument("--n", type=int, default=300)
    ap.add_argument("--k", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--out", default="out/failure_modes.json")
    args = ap.parse_args()
    cfg = load_config(args.config)

    res, fs, pca, km = failure_modes(cfg, args.gamma, n_particles=args.n, k=args.k, seed=args.seed)
    print(f"AMS p_hat {res.p_hat:.3e} with {res.n_evals} evaluations, {len(res.levels)} levels, "
          f"{len(fs.points)} failures ({len(np.unique(fs.latents, axis=0))} distinct)")
    names = [fs.feature_names[i] for i in pca.kept]
    for j, comp in enumerate(pca.components):
        top = np.argsort(-np.abs(comp))[:5]
        print(f"PC{j + 1} ({pca.explained[j]:.1%}): " + ", ".join(f"{names[i]} {comp[i]:+.2f}" for i in top))

    flow = fit_flow(fs.latents, TrainConfig(epochs=args.epochs, seed=args.seed))
    lik = cluster_likelihoods(km.labels, flow, fs.latents)
    weather = {n: fs.feature_names.index(n) for n in ("P_g", "A", "C", "P_a")}
    clusters = []
    for c in range(args.k):
        rows = fs.points[km.labels == c]
        doc = {"cluster": c, "size": len(rows), "median_log_prob": lik["median_log_prob"].get(c),
               "weather_mean": {n: float(rows[:, i].mean()) for n, i in weather.items()}}
        clusters.append(doc)
        w = doc["weather_mean"]
        print(f"cluster {c}: {len(rows):4d} pts, median log q {doc['median_log_prob']:8.2f}, "
              f"sun alt {w['A']:5.1f}, cloud {w['C']:5.1f}, rain {w['P_a']:5.1f}, ground {w['P_g']:5.1f}")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"gamma": args.gamma, "p_hat": res.p_hat, "n_evals": res.n_evals,
                               "explained": pca.explained.tolist(), "clusters": clusters,
                               "ratios": lik["ratios"]}, indent=1) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
