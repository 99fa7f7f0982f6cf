"""Experiment harness: repeated random splits, training, evaluation, CSV export.

A run generates one synthetic dataset from the master seed, then for every
split (seeded as ``master_seed XOR split``) shuffles instances into train and
test fractions, trains each requested method, evaluates decision quality and
accuracy on the test instances, and appends a Random baseline.  Detail rows
go to ``out_path``; a companion summary file adds bootstrap confidence
intervals per method.  Splits are independent and may run in parallel worker
processes; results are merged in split order so outputs stay deterministic.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass

import numpy as np

from . import metrics, training
from .domains import (
    gen_bipartite_matching,
    gen_budget_allocation,
    gen_diverse_recommendation,
)
from .models import mlp_forward

__all__ = [
    "ExperimentConfig",
    "RunResult",
    "ConfigError",
    "generate_dataset",
    "run_experiment",
    "export_predictions",
    "summarize",
    "DETAIL_HEADER",
]

DETAIL_HEADER = "method,split,seed,k,gamma,decision_quality,mse,ce,auc"

SUMMARY_HEADER = (
    "method,splits,k,gamma,"
    "decision_quality_mean,decision_quality_lo,decision_quality_hi,"
    "mse_mean,mse_lo,mse_hi,ce_mean,ce_lo,ce_hi,auc_mean,auc_lo,auc_hi"
)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """Everything a benchmark run needs; desk-scale defaults.

    The default sizes are scaled down from the reference datasets (budget
    100x500, matching 50+50, recommendation 100 items) so a full run stays
    well under ten minutes.
    """

    domain: str = "budget"
    k: int = 5
    gamma: float = 0.1
    depth: int = 1
    hidden: int = 200
    methods: tuple = ("decision", "two_stage")
    include_random: bool = True
    epochs: int = 30
    lr: float = 1e-3
    n_instances: int = 40
    split_fraction: float = 0.8
    n_splits: int = 5
    master_seed: int = 0
    out_path: str = "results.csv"
    sga_steps: int = 25
    sga_step_size: float = 0.05
    sga_item_frac: float = 0.3
    jobs: int = 1
    # domain size knobs
    channels: int = 20
    customers: int = 50
    density: float = 0.1
    side_size: int = 10
    feature_dim: int = 8
    communities: int = 2
    items: int = 30
    topics: int = 20
    users: int = 25

    def validate(self):
        if self.domain not in ("budget", "matching", "recommendation"):
            raise ConfigError(f"unknown domain {self.domain!r}")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("split_fraction must lie in (0, 1)")
        if self.n_splits < 1:
            raise ConfigError("need at least one split")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.depth not in (1, 2):
            raise ConfigError("model depth must be 1 or 2")
        if self.n_instances < 2:
            raise ConfigError("need at least two instances to split")
        for m in self.methods:
            if m not in ("decision", "two_stage"):
                raise ConfigError(f"unknown method {m!r}")
        return self


@dataclass
class RunResult:
    """One detail CSV row: a (method, split) evaluation on the test fraction."""

    method: str
    split: int
    seed: int
    k: int
    gamma: float
    decision_quality: float
    mse: float | None = None
    ce: float | None = None
    auc: float | None = None

    def csv_row(self):
        return ",".join(
            [
                self.method,
                str(self.split),
                str(self.seed),
                str(self.k),
                _fmt(self.gamma),
                _fmt(self.decision_quality),
                _fmt(self.mse),
                _fmt(self.ce),
                _fmt(self.auc),
            ]
        )


def generate_dataset(cfg: ExperimentConfig):
    seed = cfg.master_seed
    if cfg.domain == "budget":
        return gen_budget_allocation(
            seed, cfg.channels, cfg.customers, density=cfg.density,
            instances=cfg.n_instances, k=cfg.k,
        )
    if cfg.domain == "matching":
        return gen_bipartite_matching(
            seed, cfg.side_size, feature_dim=cfg.feature_dim,
            communities=cfg.communities, instances=cfg.n_instances,
        )
    return gen_diverse_recommendation(
        seed, cfg.items, cfg.topics, cfg.users, instances=cfg.n_instances, k=cfg.k,
    )


def _method_name(cfg, method):
    return "nn%d-%s" % (cfg.depth, "decision" if method == "decision" else "2stage")


def _run_split(cfg: ExperimentConfig, instances, split: int):
    """Train and evaluate every method on one random split (pure function)."""
    split_seed = cfg.master_seed ^ split
    rng = np.random.default_rng(split_seed)
    n = len(instances)
    perm = rng.permutation(n)
    n_train = min(max(int(round(cfg.split_fraction * n)), 1), n - 1)
    train = [instances[int(i)] for i in perm[:n_train]]
    test = [instances[int(i)] for i in perm[n_train:]]

    rows = []
    for j, method in enumerate(cfg.methods):
        model, _ = training.train_model(
            cfg.domain, train, method, cfg.k, gamma=cfg.gamma, depth=cfg.depth,
            hidden=cfg.hidden, epochs=cfg.epochs, lr=cfg.lr,
            seed=np.random.default_rng([split_seed, j]),
            sga_steps=cfg.sga_steps, sga_step_size=cfg.sga_step_size,
            sga_item_frac=cfg.sga_item_frac,
        )
        ev = training.evaluate_model(cfg.domain, model, test, cfg.k)
        rows.append(
            RunResult(
                method=_method_name(cfg, method),
                split=split,
                seed=split_seed,
                k=cfg.k,
                gamma=cfg.gamma,
                decision_quality=ev["quality"],
                mse=ev["mse"],
                ce=ev["ce"],
                auc=ev["auc"],
            )
        )
    if cfg.include_random:
        rng_base = np.random.default_rng([split_seed, len(cfg.methods), 777])
        vals = [
            training.instance_quality(
                cfg.domain,
                training.random_decision(cfg.domain, inst, cfg.k, rng_base),
                inst,
                cfg.k,
            )
            for inst in test
        ]
        rows.append(
            RunResult(
                method="random",
                split=split,
                seed=split_seed,
                k=cfg.k,
                gamma=cfg.gamma,
                decision_quality=float(np.mean(vals)),
            )
        )
    return rows


def run_experiment(cfg: ExperimentConfig):
    """Full protocol: returns all detail rows and writes detail + summary CSVs."""
    cfg.validate()
    instances = generate_dataset(cfg)
    if cfg.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            per_split = list(
                pool.map(_run_split, [cfg] * cfg.n_splits, [instances] * cfg.n_splits,
                         range(cfg.n_splits))
            )
    else:
        per_split = [_run_split(cfg, instances, s) for s in range(cfg.n_splits)]
    rows = [r for split_rows in per_split for r in split_rows]
    _write_detail(rows, cfg.out_path)
    _write_summary(rows, _summary_path(cfg.out_path), cfg.master_seed)
    return rows


def summarize(rows, seed=0):
    """Per-method means with percentile-bootstrap confidence intervals."""
    methods = []
    for r in rows:
        if r.method not in methods:
            methods.append(r.method)
    out = []
    for method in methods:
        sub = [r for r in rows if r.method == method]
        entry = {"method": method, "splits": len(sub), "k": sub[0].k,
                 "gamma": sub[0].gamma}
        for key in ("decision_quality", "mse", "ce", "auc"):
            vals = [getattr(r, key) for r in sub]
            if any(v is None for v in vals):
                entry[key] = (None, None, None)
            else:
                entry[key] = metrics.bootstrap_ci(vals, seed=seed)
        out.append(entry)
    return out


def _summary_path(out_path):
    out_path = str(out_path)
    if out_path.endswith(".csv"):
        return out_path[:-4] + "_summary.csv"
    return out_path + "_summary.csv"


def _write_detail(rows, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(DETAIL_HEADER + "\n")
        for r in rows:
            f.write(r.csv_row() + "\n")


def _write_summary(rows, path, seed):
    entries = summarize(rows, seed=seed)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(SUMMARY_HEADER + "\n")
        for e in entries:
            cells = [e["method"], str(e["splits"]), str(e["k"]), _fmt(e["gamma"])]
            for key in ("decision_quality", "mse", "ce", "auc"):
                cells.extend(_fmt(v) for v in e[key])
            f.write(",".join(cells) + "\n")


def export_predictions(model, inst, prefix):
    """Write the predicted matrix, the true matrix, and per-row out-weights.

    Out-weights (row sums) are the coarse importance scores used to analyze
    what a trained model captures; the returned value is the squared
    correlation between predicted and true out-weights so offline
    recomputation can be checked against the in-process value.
    """
    pred, _ = mlp_forward(model, inst.features)
    true = inst.targets
    _write_matrix(f"{prefix}_pred.csv", pred)
    _write_matrix(f"{prefix}_true.csv", true)
    pred_ow = pred.sum(axis=1)
    true_ow = true.sum(axis=1)
    with open(f"{prefix}_outweight.csv", "w", encoding="utf-8", newline="\n") as f:
        f.write("row,predicted_outweight,true_outweight\n")
        for i, (a, b) in enumerate(zip(pred_ow, true_ow)):
            f.write(f"{i},{_fmt(a)},{_fmt(b)}\n")
    if np.std(pred_ow) == 0.0 or np.std(true_ow) == 0.0:
        return 0.0
    r = float(np.corrcoef(pred_ow, true_ow)[0, 1])
    return r * r


def _write_matrix(path, M):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in np.asarray(M, dtype=float):
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v):
    if v is None:
        return ""
    return format(float(v), ".12g")
