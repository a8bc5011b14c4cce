"""Experiment runner.

A run is described by a TOML file::

    experiment = "nearness"      # norm2d | nearness | graph | gvf | axioms | figure1
    seeds = [0, 1, 2]            # master seeds, one run each
    out = "runs/nearness"
    threads = 1                  # worker processes over seeds

    [nearness]                   # section named after the experiment
    n = 200
    solver = "tf"

Every key of the experiment section is optional; defaults are the desk
recipes in ``DEFAULTS``.  Command-line flags override the file.

Each master seed is split into independent streams (``data``, ``init``,
``noise``, ``eval``) by hashing ``"<seed>/<label>"`` with SHA-256 and
keeping the first 4 bytes, so changing how many draws one component makes
never shifts another's.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from . import __version__

EXPERIMENTS = ("norm2d", "nearness", "graph", "gvf", "axioms", "figure1")

DEFAULTS = {
    "norm2d": {"hull": "random", "symmetric": False, "train_size": 128, "model": "deepnorm",
               "epochs": 5000, "batch": 16, "lr": 1e-3, "eval_every": 100,
               "depth": 3, "width": 50, "components": 10, "component_dim": 2},
    "nearness": {"n": 200, "mode": "sym", "solver": "tf", "max_iters": 400, "tol": 1e-10,
                 "epochs": 1500, "lrs": [1e-3, 3e-4, 1e-4], "batch": 1000, "width": 512,
                 "components": 128, "component_dim": 48, "pieces": 5},
    "graph": {"kind": "grid3d", "size": 10, "model": "deepnorm", "train_size": 20000, "pool_size": 30000,
              "test_size": 5000, "phi_depth": 1, "epochs": 1000, "batch": 256, "lr": 1e-3, "decay_every": 250},
    "gvf": {"env": "four_room", "asym": False, "head": "widenorm", "split": "goal", "fraction": 1.0,
            "epochs": 1000, "batch": 128, "lr": 1e-4, "alpha": 0.95, "eval_every": 200, "episodes": 100,
            "filters": [32, 64]},
    "axioms": {"head": "DeepNorm", "dim": 8, "samples": 10000, "tol": 1e-9,
               "axioms": ["nonneg", "N2", "N3", "C1"], "config": {}},
    "figure1": {"dims": [2, 4, 8, 16], "restarts": 5, "steps": 1000},
}

CHOICES = {
    ("norm2d", "hull"): ("random", "square", "diamond"),
    ("norm2d", "model"): ("maha", "deepnorm", "widenorm", "mlp"),
    ("norm2d", "train_size"): (16, 128),
    ("nearness", "mode"): ("sym", "asym"),
    ("nearness", "solver"): ("tf", "eucl", "wn", "dn"),
    ("graph", "kind"): ("grid3d", "grid3d_directed", "grid3d_randpruned", "taxi", "push"),
    ("graph", "model"): ("mahalanobis", "widenorm", "deepnorm_icnn", "deepnorm", "mlp"),
    ("gvf", "env"): ("four_room", "maze"),
    ("gvf", "head"): ("mlp", "icnn", "deepnorm", "widenorm", "euclidean"),
    ("gvf", "split"): ("goal", "state"),
}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def derive_seed(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(master)}/{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def seed_streams(master: int) -> dict:
    return {label: derive_seed(master, label) for label in ("data", "init", "noise", "eval")}


@dataclasses.dataclass
class ExperimentConfig:
    experiment: str
    params: dict
    seeds: list
    out: str = "runs"
    threads: int = 1

    def canonical(self) -> dict:
        return {"experiment": self.experiment, "params": self.params, "seeds": list(self.seeds)}

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def make_config(raw: dict, overrides: dict | None = None) -> ExperimentConfig:
    """Validate a raw mapping (parsed TOML) plus overrides into a config."""
    raw = dict(raw)
    exp = raw.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError("experiment", f"unknown experiment kind {exp!r}; expected one of {EXPERIMENTS}")
    params = dict(DEFAULTS[exp])
    section = raw.get(exp, {})
    if not isinstance(section, dict):
        raise ConfigError(exp, "must be a table")
    for key, value in {**section, **(overrides or {})}.items():
        if value is None:
            continue
        if key not in params:
            raise ConfigError(f"{exp}.{key}", "unknown field")
        params[key] = value
    for (e, key), allowed in CHOICES.items():
        if e == exp and params[key] not in allowed:
            raise ConfigError(f"{exp}.{key}", f"{params[key]!r} not in {allowed}")
    if exp == "gvf" and not 0.0 < float(params["fraction"]) <= 1.0:
        raise ConfigError("gvf.fraction", "must be in (0, 1]")
    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds", "must be a nonempty list of integers")
    threads = raw.get("threads", 1)
    if not isinstance(threads, int) or threads < 1:
        raise ConfigError("threads", "must be a positive integer")
    return ExperimentConfig(exp, params, list(seeds), str(raw.get("out", "runs")), threads)


def load_config(path) -> dict:
    try:
        return tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError("config", str(exc)) from exc


# ---------------------------------------------------------------------------
# experiments: each takes (params, seed streams, output dir) and returns metrics


def _norm2d(p, st, out: Path) -> dict:
    from .norm2d import export_contours, make_hull, make_model, sample_dataset, save_contours, train_norm2d
    from .norms import save_head

    hull = make_hull(p["hull"], st["data"], bool(p["symmetric"]))
    data = sample_dataset(hull, int(p["train_size"]), st["noise"])
    model = make_model(p["model"], st["init"], p["depth"], p["width"], p["components"], p["component_dim"])
    res = train_norm2d(model, data, p["epochs"], p["batch"], p["lr"], p["eval_every"], seed=st["eval"])
    hull.to_csv(out / "hull.csv")
    data.to_csv(out / "dataset.csv")
    save_contours(export_contours(res.model), out / "contours.csv")
    _curve(out / "curve.csv", ("epoch", "train_mse", "test_mse"), res.curve)
    save_head(res.model, out / "model.json")
    return {"test_mse": res.best_test_mse, "best_epoch": res.best_epoch}


def _nearness(p, st, out: Path) -> dict:
    from .nearness import (NearnessSchedule, generate_asymmetric, generate_symmetric, train_neural_nearness,
                           triangle_fix)

    gen = generate_symmetric if p["mode"] == "sym" else generate_asymmetric
    prob = gen(int(p["n"]), st["data"])
    if p["solver"] == "tf":
        sol = triangle_fix(prob, int(p["max_iters"]), float(p["tol"]))
    else:
        kind = {"eucl": "euclidean", "wn": "widenorm", "dn": "deepnorm"}[p["solver"]]
        sch = NearnessSchedule(p["epochs"], tuple(p["lrs"]), p["batch"], p["width"], p["components"],
                               p["component_dim"], p["pieces"])
        sol = train_neural_nearness(prob, kind, sch, seed=st["init"])
    np.savetxt(out / "D.csv", prob.D, delimiter=",", fmt="%.17g")
    np.savetxt(out / "X.csv", sol.X, delimiter=",", fmt="%.17g")
    return {"J_MN": sol.distortion, "J_MN_sq": sol.distortion ** 2, "violations": sol.violations,
            "iterations": sol.iterations, "solve_time": sol.wall_time}


def _graph(p, st, out: Path) -> dict:
    from .graphdist import build_graph, graph_model, landmark_features, make_dataset, train_graph_model

    graph = build_graph(p["kind"], int(p["size"]), st["data"])
    feats = landmark_features(graph, seed=st["noise"])
    data = make_dataset(graph, feats, int(p["train_size"]), int(p["pool_size"]), int(p["test_size"]), st["data"])
    model = graph_model(p["model"], feats.dim, graph.directed, int(p["phi_depth"]), seed=st["init"])
    run = train_graph_model(model, data, int(p["epochs"]), int(p["batch"]), float(p["lr"]), int(p["decay_every"]),
                            seed=st["eval"])
    _curve(out / "curve.csv", ("epoch", "train_mse", "test_mse"),
           [(i + 1, a, b) for i, (a, b) in enumerate(zip(run.train_mse, run.test_mse))])
    return {"test_mse": run.final_test_mse, "nodes": graph.n}


def _gvf(p, st, out: Path) -> dict:
    from .gvf import (ValueModel, build_env, evaluate, ground_truth_values, heatmaps, save_grid,
                      split_dataset, td_train, value_table)

    env = build_env(p["env"], bool(p["asym"]), st["data"])
    data = split_dataset(env, p["split"], float(p["fraction"]))
    model = ValueModel(p["head"], bool(p["asym"]), env.shape, tuple(p["filters"]), seed=st["init"])
    run = td_train(env, model, data, int(p["epochs"]), int(p["batch"]), float(p["lr"]), float(p["alpha"]),
                   seed=st["noise"], eval_every=int(p["eval_every"]), eval_episodes=int(p["episodes"]))
    _curve(out / "loss.csv", ("epoch", "td_loss"), [(i + 1, v) for i, v in enumerate(run.loss)])
    _curve(out / "evals.csv", ("epoch", "split", "mse", "success", "spl"),
           [(e, s, m["mse"], m["success"], m["spl"]) for e, s, m in run.evals])
    for name, grid in heatmaps(env, model).items():
        save_grid(grid, out / f"heatmap_{name}.csv")
    V, Vs = value_table(env, model), ground_truth_values(env)
    metrics = {}
    for split in ("train", "test"):
        m = evaluate(env, model, getattr(data, split), n_episodes=int(p["episodes"]), seed=st["eval"], V=V, Vstar=Vs)
        metrics.update({f"{split}_{k}": v for k, v in m.items()})
    return metrics


def _axioms(p, st, out: Path) -> dict:
    from .axioms import check_all, gaussian_sampler, write_reports
    from .norms import build_head

    head = build_head({"kind": p["head"], "in_dim": int(p["dim"]), **p["config"]}, seed=st["init"])
    reports = check_all(head, p["axioms"], gaussian_sampler(int(p["dim"])), int(p["samples"]),
                        float(p["tol"]), st["eval"])
    write_reports(reports, out / "axioms.jsonl")
    return {f"{r.axiom}_violations": r.violations for r in reports}


def _figure1(p, st, out: Path) -> dict:
    from .metrics import figure1

    res = figure1(tuple(p["dims"]), int(p["restarts"]), st["init"] % 100000, int(p["steps"]))
    return {f"{k}_mse": v for k, v in res.items()}


RUNNERS = {"norm2d": _norm2d, "nearness": _nearness, "graph": _graph, "gvf": _gvf,
           "axioms": _axioms, "figure1": _figure1}


def _curve(path, header, rows) -> None:
    with Path(path).open("w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in r) + "\n")


@dataclasses.dataclass
class RunReport:
    experiment: str
    config_hash: str
    params: dict
    per_seed: list      # {"seed", "metrics"} or {"seed", "error"}
    aggregate: dict     # metric -> {"mean", "sd", "n"}
    wall_time: float
    version: str = __version__

    @property
    def ok(self) -> bool:
        return all("error" not in r for r in self.per_seed)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, default=list))

    @classmethod
    def from_json(cls, path) -> "RunReport":
        return cls(**json.loads(Path(path).read_text()))


def aggregate(per_seed) -> dict:
    """Mean and sample standard deviation of every numeric metric over successful seeds."""
    values: dict = {}
    for r in per_seed:
        for k, v in r.get("metrics", {}).items():
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                values.setdefault(k, []).append(float(v))
    out = {}
    for k, vs in values.items():
        mean = sum(vs) / len(vs)
        sd = math.sqrt(sum((v - mean) ** 2 for v in vs) / (len(vs) - 1)) if len(vs) > 1 else 0.0
        out[k] = {"mean": mean, "sd": sd, "n": len(vs)}
    return out


def _run_seed(experiment, params, seed, out) -> dict:
    import torch

    torch.set_num_threads(1)
    seed_dir = Path(out) / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    try:
        return {"seed": seed, "metrics": RUNNERS[experiment](params, seed_streams(seed), seed_dir)}
    except Exception as exc:  # recorded per seed; the run carries on
        return {"seed": seed, "error": f"{type(exc).__name__}: {exc}", "trace": traceback.format_exc()}


def run(cfg: ExperimentConfig) -> RunReport:
    """Run every seed, write per-seed artifacts and ``report.json`` under ``cfg.out``."""
    start = time.perf_counter()
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError("out", str(exc)) from exc
    if cfg.threads > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            per_seed = list(pool.map(_run_seed, *zip(*[(cfg.experiment, cfg.params, s, out) for s in cfg.seeds])))
    else:
        per_seed = [_run_seed(cfg.experiment, cfg.params, s, out) for s in cfg.seeds]
    report = RunReport(cfg.experiment, cfg.hash(), cfg.params, per_seed, aggregate(per_seed),
                       time.perf_counter() - start)
    report.to_json(out / "report.json")
    return report


# ---------------------------------------------------------------------------
# consolidated tables

KEY_FIELDS = {"norm2d": ("hull", "symmetric", "model", "train_size"), "nearness": ("mode", "n", "solver"),
              "graph": ("kind", "model", "train_size"), "gvf": ("env", "asym", "head", "split", "fraction"),
              "axioms": ("head",), "figure1": ()}
MAIN_METRICS = {"norm2d": ("test_mse",), "nearness": ("J_MN", "J_MN_sq", "violations"),
                "graph": ("test_mse",), "gvf": ("train_spl", "test_spl", "test_mse"),
                "axioms": (), "figure1": ("euclidean_mse", "deepnorm_mse", "widenorm_mse")}


def report(run_dirs) -> tuple[list, str]:
    """One row per run: key config fields, then mean and sd of the headline metrics."""
    rows = []
    for d in run_dirs:
        path = Path(d) / "report.json"
        if not path.exists():
            rows.append({"run": str(d), "incomplete": True})
            continue
        r = RunReport.from_json(path)
        row = {"run": str(d), "experiment": r.experiment, "seeds": len(r.per_seed)}
        row.update({k: r.params.get(k) for k in KEY_FIELDS[r.experiment]})
        wanted = MAIN_METRICS[r.experiment] or tuple(r.aggregate)
        missing = False
        for m in wanted:
            agg = r.aggregate.get(m)
            if agg is None:
                missing = True
                row[m] = None
            else:
                row[m] = agg["mean"]
                row[f"{m}_sd"] = agg["sd"]
        row["incomplete"] = missing or not all("error" not in s for s in r.per_seed)
        rows.append(row)
    cols = []
    for row in rows:
        cols += [c for c in row if c not in cols]
    lines = ["  ".join(f"{c:>12}" for c in cols)]
    for row in rows:
        lines.append("  ".join(f"{_fmt(row.get(c)):>12}" for c in cols))
    return rows, "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.3g}"
    return str(v)


def write_table(rows, path) -> None:
    cols = []
    for row in rows:
        cols += [c for c in row if c not in cols]
    with Path(path).open("w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join("" if row.get(c) is None else str(row.get(c)) for c in cols) + "\n")


# ---------------------------------------------------------------------------
# argument parsing

FLAGS = {
    "norm2d": [("--hull", str), ("--symmetric", bool), ("--train-size", int), ("--model", str), ("--epochs", int)],
    "nearness": [("--n", int), ("--mode", str), ("--solver", str), ("--epochs", int), ("--max-iters", int)],
    "graph": [("--kind", str), ("--size", int), ("--model", str), ("--train-size", int), ("--epochs", int),
              ("--phi-depth", int)],
    "gvf": [("--env", str), ("--asym", bool), ("--head", str), ("--fraction", float), ("--split", str),
            ("--epochs", int), ("--batch", int), ("--lr", float)],
    "axioms": [("--head", str), ("--dim", int), ("--samples", int), ("--tol", float)],
    "figure1": [("--restarts", int), ("--steps", int)],
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, action="append", help="master seed (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker processes over seeds")
    parser = argparse.ArgumentParser(prog="triq", description="Triangle-inequality metric learning experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for exp in EXPERIMENTS:
        sp = sub.add_parser(exp, parents=[common])
        for flag, typ in FLAGS[exp]:
            if typ is bool:
                sp.add_argument(flag, action="store_const", const=True, default=None)
            else:
                sp.add_argument(flag, type=typ)
    rp = sub.add_parser("report")
    rp.add_argument("runs", nargs="+", help="run directories containing report.json")
    rp.add_argument("--csv", help="also write the table as CSV")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        rows, text = report(args.runs)
        print(text)
        if args.csv:
            write_table(rows, args.csv)
        return 0 if not any(r.get("incomplete") for r in rows) else 2
    try:
        raw = load_config(args.config) if args.config else {}
        if raw.get("experiment", args.command) != args.command:
            raise ConfigError("experiment", f"config is for {raw['experiment']!r}, command is {args.command!r}")
        raw["experiment"] = args.command
        if args.seed:
            raw["seeds"] = args.seed
        if args.out:
            raw["out"] = args.out
        elif "out" not in raw:
            raw["out"] = str(Path("runs") / args.command)
        if args.threads:
            raw["threads"] = args.threads
        overrides = {flag[2:].replace("-", "_"): getattr(args, flag[2:].replace("-", "_"))
                     for flag, _ in FLAGS[args.command]}
        cfg = make_config(raw, overrides)
        rep = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    summary = {k: v["mean"] for k, v in rep.aggregate.items()}
    print(json.dumps({"experiment": rep.experiment, "config_hash": rep.config_hash, "metrics": summary}))
    for r in rep.per_seed:
        if "error" in r:
            print(f"seed {r['seed']} failed: {r['error']}", file=sys.stderr)
    return 0 if rep.ok else 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
