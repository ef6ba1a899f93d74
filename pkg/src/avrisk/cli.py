"""Command-line driver: one subcommand per pipeline stage.

    avrisk estimate --method ams --config configs/gaussian_d20.json --gamma -3 --n 1000
    avrisk train-flow --failures out/failures.jsonl
    avrisk is-estimate --model out/flow.json --config configs/gaussian_d20.json --gamma -3

Exit status: 0 on success, 1 on a usage error, 2 on a runtime failure (a
diagnostic JSON object is printed to stdout and written to the output
directory). Every run writes ``<subcommand>.manifest.json`` next to its
outputs.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import os
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from avrisk import __version__
from avrisk.ams import CONVERGED, AmsConfig, run_ams
from avrisk.analysis import (AnalysisError, FailureSet, RunSet, cluster_likelihoods, compare_rows,
                             kmeans_cluster, pca_project)
from avrisk.config import ConfigError, load_config
from avrisk.flow import FlowError, FlowModel, TrainConfig, fit_flow, unique_count
from avrisk.harness import BatchError, PoolConfig, EvalPool
from avrisk.highway import simulate_highway
from avrisk.importance import is_estimate
from avrisk.naive import estimate_naive
from avrisk.objectives import HighwayObjective


class UsageError(Exception):
    pass


class RunFailure(Exception):
    def __init__(self, message: str, diagnostic: dict | None = None):
        super().__init__(message)
        self.diagnostic = diagnostic or {"error": message}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# output helpers


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def dumps(doc) -> str:
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


def write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Outputs:
    """Every file a subcommand writes goes through here, inside out_dir."""

    def __init__(self, out_dir: str):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.written: list[str] = []

    def path(self, name: str) -> Path:
        if not name or Path(name).name != name or name in (".", ".."):
            raise UsageError(f"output name {name!r} must be a plain file name")
        return self.dir / name

    def write(self, name: str, text: str) -> Path:
        p = self.path(name)
        write_atomic(p, text)
        self.written.append(str(p))
        return p


def _nan_to_none(x):
    return None if isinstance(x, float) and not math.isfinite(x) else x


# ---------------------------------------------------------------------------
# shared plumbing


def make_pool(args, objective) -> EvalPool:
    command = tuple(args.sim_command.split()) if args.sim_command else None
    backend = args.backend
    try:
        cfg = PoolConfig(n_workers=args.workers, backend=backend, command=command,
                         address=args.sim_address, timeout_ms=args.timeout_ms,
                         max_retries=args.max_retries)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return EvalPool(cfg, objective, master_seed=args.seed)


def need_config(args):
    if not args.config:
        raise UsageError("--config is required")
    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    try:
        return load_config(args.config)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def read_jsonl(path) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {path}")
    with p.open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# subcommands


def cmd_sample(args, out: Outputs) -> dict:
    cfg = need_config(args)
    rng = np.random.default_rng(args.seed)
    U, X = cfg.space.sample(rng, args.n)
    lines = [json.dumps({"id": i, "u": U[i].tolist(), "x": X[i].tolist()}, separators=(",", ":"))
             for i in range(args.n)]
    out.write(args.out or "samples.jsonl", "\n".join(lines) + "\n")
    return {"n": args.n}


def cmd_simulate(args, out: Outputs) -> dict:
    cfg = need_config(args)
    if args.scenarios:
        recs = read_jsonl(args.scenarios)
        X = np.array([r["x"] for r in recs], dtype=float)
        U = np.array([r.get("u", r["x"]) for r in recs], dtype=float)
    else:
        U, X = cfg.space.sample(np.random.default_rng(args.seed), args.n)
    with make_pool(args, cfg.objective) as pool:
        f = pool.evaluate(U, X)
    lines = [json.dumps({"id": i, "x": X[i].tolist(), "f": float(f[i])}, separators=(",", ":"))
             for i in range(len(f))]
    out.write(args.out or "simulate.jsonl", "\n".join(lines) + "\n")
    summary = {"n": len(f), "min_f": float(f.min()), "mean_f": float(f.mean())}
    if args.trace is not None:
        if not isinstance(cfg.objective, HighwayObjective):
            raise UsageError("--trace needs a highway config")
        if not 0 <= args.trace < len(X):
            raise UsageError(f"--trace index must lie in [0, {len(X)})")
        tr = simulate_highway(X[args.trace], cfg.objective.cfg)
        p = out.path(f"trace_{args.trace}.jsonl")
        with open(p, "w") as fh:
            tr.write_jsonl(fh)
        out.written.append(str(p))
        summary["trace"] = tr.summary()
    return summary


def _run_estimate(args, cfg, seed: int):
    with make_pool(args, cfg.objective) as pool:
        if args.method == "naive":
            return estimate_naive(cfg.objective, cfg.space, args.n, args.gamma, pool, seed), None
        acfg = AmsConfig(delta=args.delta, t_mcmc=args.t_mcmc, gamma=args.gamma, n_particles=args.n,
                         beta=args.beta, adapt_beta=not args.fixed_beta, max_iters=args.max_iters,
                         seed=seed)
        return None, run_ams(cfg.objective, cfg.space, acfg, pool)


def cmd_estimate(args, out: Outputs) -> dict:
    cfg = need_config(args)
    name = args.out or f"estimate_{args.method}.json"
    if args.n < 1 or args.repeat < 1:
        raise UsageError("--n and --repeat must be >= 1")
    if args.method == "ams":
        try:
            AmsConfig(delta=args.delta, t_mcmc=args.t_mcmc, gamma=args.gamma, n_particles=args.n,
                      beta=args.beta, max_iters=args.max_iters)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if args.repeat > 1:
        ests = []
        for r in range(args.repeat):
            est, res = _run_estimate(args, cfg, args.seed + r)
            if res is not None:
                if res.terminated != CONVERGED:
                    raise RunFailure(f"run {r} {res.terminated}", res.to_json())
                est = res.to_estimate()
            ests.append(est)
        rs = RunSet(args.method, args.gamma, ests)
        out.write(name, dumps(rs.to_json()))
        lo, hi = rs.interval() if len(ests) > 1 else (ests[0].ci_lo, ests[0].ci_hi)
        return {"mean": rs.mean(), "interval": [lo, hi], "runs": args.repeat}
    est, res = _run_estimate(args, cfg, args.seed)
    if res is None:
        out.write(name, dumps(est.to_json()))
        return est.to_json()
    doc = res.to_json()
    doc["levels"] = [{k: _nan_to_none(v) for k, v in lv.items()} for lv in doc["levels"]]
    out.write(name, dumps(doc))
    if args.failures_out:
        text = "".join(json.dumps(p.to_json(), separators=(",", ":")) + "\n" for p in res.survivors)
        out.write(args.failures_out, text)
    if res.terminated != CONVERGED:
        raise RunFailure(f"AMS {res.terminated}", {"terminated": res.terminated, "n_evals": res.n_evals,
                                                     "levels": len(res.levels), "log_p": res.log_p})
    return {"p_hat": res.p_hat, "n_evals": res.n_evals, "levels": len(res.levels)}


def cmd_train_flow(args, out: Outputs) -> dict:
    recs = read_jsonl(args.failures)
    if not recs:
        raise UsageError("failure file is empty")
    U = np.array([r["u"] for r in recs], dtype=float)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                       val_fraction=args.val_fraction, n_layers=args.layers, hidden_width=args.hidden,
                       s_max=args.s_max, seed=args.seed, optimizer=args.optimizer)
    try:
        model = fit_flow(U, tcfg)
    except ValueError as exc:
        raise RunFailure(str(exc)) from exc
    out.write(args.out or "flow.json", json.dumps(model.to_json(), allow_nan=False) + "\n")
    best = max(model.history, key=lambda h: h["val"])
    return {"n_samples": len(U), "n_unique": unique_count(U), "best_epoch": best["epoch"],
            "best_val_log_prob": best["val"]}


def cmd_is_estimate(args, out: Outputs) -> dict:
    cfg = need_config(args)
    if not Path(args.model).is_file():
        raise UsageError(f"model file not found: {args.model}")
    model = FlowModel.load(args.model)
    if not 0.0 <= args.alpha <= 1.0:
        raise UsageError("--alpha must lie in [0, 1]")
    ests = []
    with make_pool(args, cfg.objective) as pool:
        for r in range(args.repeat):
            ests.append(is_estimate(model, cfg.space, cfg.objective, args.gamma, args.m, args.alpha,
                                    pool, args.seed + r))
    name = args.out or "is_estimate.json"
    if args.repeat > 1:
        rs = RunSet("flow_is", args.gamma, ests)
        out.write(name, dumps(rs.to_json()))
        return {"mean": rs.mean(), "runs": args.repeat}
    out.write(name, dumps(ests[0].to_json()))
    return ests[0].to_json()


def cmd_compare(args, out: Outputs) -> dict:
    sets = []
    for path in args.runsets:
        if not Path(path).is_file():
            raise UsageError(f"file not found: {path}")
        sets.append(RunSet.from_json(json.loads(Path(path).read_text())))
    rows = compare_rows(sets)
    fields = ["gamma", "method", "mean", "variance", "ratio", "runs", "budget"]
    p = out.path(args.out or "compare.csv")
    with open(p, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    out.written.append(str(p))
    return {"rows": len(rows)}


def cmd_analyze(args, out: Outputs) -> dict:
    recs = read_jsonl(args.failures)
    names = None
    if args.config:
        names = need_config(args).space.param_names
    fs = FailureSet.from_particles(recs, names)
    pca = pca_project(fs, args.components)
    km = kmeans_cluster(pca.projected, args.k, seed=args.seed)
    p = out.path(args.out or "analysis.csv")
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"pc{j + 1}" for j in range(args.components)] + ["cluster"])
        for rec, row, lab in zip(recs, pca.projected, km.labels):
            w.writerow([rec.get("id", "")] + [repr(float(v)) for v in row] + [int(lab)])
    out.written.append(str(p))
    summary = {
        "n_points": len(recs),
        "kept_features": [fs.feature_names[i] for i in pca.kept],
        "explained_variance": pca.explained.tolist(),
        "components": pca.components.tolist(),
        "cluster_sizes": np.bincount(km.labels, minlength=args.k).tolist(),
        "centroids": km.centroids.tolist(),
        "inertia": km.inertia,
    }
    if args.model:
        if not Path(args.model).is_file():
            raise UsageError(f"model file not found: {args.model}")
        summary["likelihood"] = cluster_likelihoods(km.labels, FlowModel.load(args.model), fs.latents)
    out.write("analysis.json", dumps(summary))
    return {"clusters": args.k, "explained_variance": summary["explained_variance"]}


COMMANDS = {
    "sample": cmd_sample,
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "train-flow": cmd_train_flow,
    "is-estimate": cmd_is_estimate,
    "compare": cmd_compare,
    "analyze": cmd_analyze,
}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--backend", choices=("in_process", "external"), default="in_process")
    common.add_argument("--sim-command", help="external simulator command line")
    common.add_argument("--sim-address", help="external simulator host:port")
    common.add_argument("--timeout-ms", type=int, default=60_000)
    common.add_argument("--max-retries", type=int, default=2)
    common.add_argument("--out-dir", default="out")
    common.add_argument("--out", help="output file name inside --out-dir")

    ap = _Parser(prog="avrisk", description="Rare-event risk estimation for driving scenarios.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sample", parents=[common], help="draw scenarios from the base law")
    p.add_argument("--n", type=int, default=100)

    p = sub.add_parser("simulate", parents=[common], help="evaluate the objective on scenarios")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--scenarios", help="JSONL with x (and optionally u) per line")
    p.add_argument("--trace", type=int, help="also write the rollout of this scenario index")

    p = sub.add_parser("estimate", parents=[common], help="naive or AMS estimate of P(f < gamma)")
    p.add_argument("--method", choices=("naive", "ams"), required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--n", type=int, default=1000, help="samples (naive) or particles (ams)")
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--t-mcmc", type=int, default=10)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--fixed-beta", action="store_true", help="disable beta adaptation")
    p.add_argument("--max-iters", type=int, default=10_000)
    p.add_argument("--repeat", type=int, default=1, help="independent runs with seeds seed..seed+R-1")
    p.add_argument("--failures-out", help="write AMS survivors (JSONL) under this name")

    p = sub.add_parser("train-flow", parents=[common], help="fit a flow to failure samples")
    p.add_argument("--failures", required=True)
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--val-fraction", type=float, default=d.val_fraction)
    p.add_argument("--layers", type=int, default=d.n_layers)
    p.add_argument("--hidden", type=int, default=d.hidden_width)
    p.add_argument("--s-max", type=float, default=d.s_max)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default=d.optimizer)

    p = sub.add_parser("is-estimate", parents=[common], help="importance-sampling estimate with a flow")
    p.add_argument("--model", required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--m", type=int, default=10_000)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--repeat", type=int, default=1)

    p = sub.add_parser("compare", parents=[common], help="variance table over run-set files")
    p.add_argument("runsets", nargs="+")

    p = sub.add_parser("analyze", parents=[common], help="PCA and k-means over failure samples")
    p.add_argument("--failures", required=True)
    p.add_argument("--model", help="flow model for per-cluster likelihoods")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--components", type=int, default=2)
    return ap


def _manifest(args, argv, out: Outputs, started: str, status: str) -> dict:
    return {
        "subcommand": args.command,
        "argv": list(argv),
        "config": args.config,
        "seed": args.seed,
        "workers": args.workers,
        "version": version_string(),
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "status": status,
        "outputs": out.written,
    }


def run_cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    try:
        out = Outputs(args.out_dir)
    except OSError as exc:
        print(f"avrisk: cannot create {args.out_dir}: {exc}", file=sys.stderr)
        return 1
    status, code = "ok", 0
    try:
        summary = COMMANDS[args.command](args, out)
        print(json.dumps(summary, separators=(",", ":"), default=float))
    except UsageError as exc:
        print(f"avrisk {args.command}: {exc}", file=sys.stderr)
        status, code = "usage_error", 1
    except RunFailure as exc:
        diag = dict(exc.diagnostic)
        diag.setdefault("error", str(exc))
        text = json.dumps(diag, separators=(",", ":"), default=_nan_to_none)
        print(text)
        out.write(f"{args.command}.error.json", text + "\n")
        status, code = "failed", 2
    except (BatchError, FlowError, AnalysisError, ConfigError, ValueError) as exc:
        diag = {"error": type(exc).__name__, "message": str(exc)}
        text = json.dumps(diag, separators=(",", ":"))
        print(text)
        out.write(f"{args.command}.error.json", text + "\n")
        status, code = "failed", 2
    out.write(f"{args.command}.manifest.json", dumps(_manifest(args, argv, out, started, status)))
    return code


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
