"""Command-line interface: generate, train, evaluate, benchmark, export.

Every subcommand accepts ``--config FILE`` with simple ``key = value`` lines
whose keys match the long flag names; explicit flags win over the config
file.  Usage errors exit with 2, runtime errors print to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import training
from .domains import (
    gen_bipartite_matching,
    gen_budget_allocation,
    gen_diverse_recommendation,
    load_instance,
    save_instance,
)
from .harness import ConfigError, ExperimentConfig, export_predictions, run_experiment, summarize
from .models import load_model, save_model

__all__ = ["cli_main", "main"]

_SIZE_FLAGS = (
    ("channels", int, 20),
    ("customers", int, 50),
    ("density", float, 0.1),
    ("side-size", int, 10),
    ("feature-dim", int, 8),
    ("communities", int, 2),
    ("items", int, 30),
    ("topics", int, 20),
    ("users", int, 25),
)

# paper-scale best performers: simple nets for coverage domains, 2 layers for matching
_DEFAULT_DEPTH = {"budget": 1, "matching": 2, "recommendation": 1}


def _add_size_flags(p):
    for name, typ, default in _SIZE_FLAGS:
        p.add_argument(f"--{name}", type=typ, default=default)


def _add_common(p):
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dflearn",
        description="Decision-focused learning benchmarks for combinatorial optimization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic instance files")
    _add_common(g)
    g.add_argument("--domain", choices=("budget", "matching", "recommendation"),
                   required=True)
    g.add_argument("--instances", type=int, default=10)
    g.add_argument("--k", type=int, default=5)
    g.add_argument("--out", required=True, help="output directory")
    _add_size_flags(g)

    t = sub.add_parser("train", help="train one model and save a checkpoint")
    _add_common(t)
    t.add_argument("--domain", choices=("budget", "matching", "recommendation"),
                   required=True)
    t.add_argument("--method", choices=("decision", "two_stage"), default="decision")
    t.add_argument("--data", default=None, help="directory of instance files")
    t.add_argument("--instances", type=int, default=20)
    t.add_argument("--k", type=int, default=5)
    t.add_argument("--gamma", type=float, default=0.1)
    t.add_argument("--depth", type=int, choices=(1, 2), default=None)
    t.add_argument("--hidden", type=int, default=200)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--sga-steps", type=int, default=25)
    t.add_argument("--sga-step-size", type=float, default=0.05)
    t.add_argument("--sga-item-frac", type=float, default=0.3)
    t.add_argument("--model-out", required=True)
    _add_size_flags(t)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on instances")
    _add_common(e)
    e.add_argument("--domain", choices=("budget", "matching", "recommendation"),
                   required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--data", default=None)
    e.add_argument("--instances", type=int, default=10)
    e.add_argument("--k", type=int, default=5)
    _add_size_flags(e)

    b = sub.add_parser("benchmark", help="full multi-split comparison, CSV output")
    _add_common(b)
    b.add_argument("--domain", choices=("budget", "matching", "recommendation"),
                   default="budget")
    b.add_argument("--k", type=int, default=5)
    b.add_argument("--gamma", type=float, default=0.1)
    b.add_argument("--splits", type=int, default=5)
    b.add_argument("--instances", type=int, default=None)
    b.add_argument("--depth", type=int, choices=(1, 2), default=None)
    b.add_argument("--hidden", type=int, default=200)
    b.add_argument("--epochs", type=int, default=30)
    b.add_argument("--lr", type=float, default=1e-3)
    b.add_argument("--split-fraction", type=float, default=0.8)
    b.add_argument("--sga-steps", type=int, default=25)
    b.add_argument("--sga-step-size", type=float, default=0.05)
    b.add_argument("--sga-item-frac", type=float, default=0.3)
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--out", required=True, help="detail CSV path")
    _add_size_flags(b)

    x = sub.add_parser("export", help="write prediction and out-weight CSVs")
    _add_common(x)
    x.add_argument("--model", required=True)
    x.add_argument("--instance", required=True, help="instance file")
    x.add_argument("--out", required=True, help="output path prefix")

    return parser


def _load_config(path, parser_defaults):
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in parser_defaults:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(val.strip())
    return values


def _coerce(text):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for typ in (int, float):
        try:
            return typ(text)
        except ValueError:
            pass
    return text


def _generate_instances(args):
    domain = args.domain
    if domain == "budget":
        return gen_budget_allocation(
            args.seed, args.channels, args.customers, density=args.density,
            instances=args.instances, k=args.k,
        )
    if domain == "matching":
        return gen_bipartite_matching(
            args.seed, args.side_size, feature_dim=args.feature_dim,
            communities=args.communities, instances=args.instances,
        )
    return gen_diverse_recommendation(
        args.seed, args.items, args.topics, args.users,
        instances=args.instances, k=args.k,
    )


def _load_dir(path, domain):
    import os

    files = sorted(
        os.path.join(path, f) for f in os.listdir(path) if f.endswith(".txt")
    )
    if not files:
        raise ConfigError(f"no instance files (*.txt) found in {path}")
    return [load_instance(f, domain) for f in files]


def _cmd_generate(args):
    instances = _generate_instances(args)
    for i, inst in enumerate(instances):
        save_instance(inst, f"{args.out.rstrip('/')}/instance_{i:04d}.txt")
    print(f"wrote {len(instances)} {args.domain} instances to {args.out}")
    return 0


def _cmd_train(args):
    data = _load_dir(args.data, args.domain) if args.data else _generate_instances(args)
    depth = args.depth if args.depth is not None else _DEFAULT_DEPTH[args.domain]
    model, info = training.train_model(
        args.domain, data, args.method, args.k, gamma=args.gamma, depth=depth,
        hidden=args.hidden, epochs=args.epochs, lr=args.lr, seed=args.seed,
        sga_steps=args.sga_steps, sga_step_size=args.sga_step_size,
        sga_item_frac=args.sga_item_frac,
    )
    save_model(model, args.model_out)
    print(f"trained {args.method} model on {len(data)} instances "
          f"-> {args.model_out} (epochs recorded: {len(info['history'])})")
    return 0


def _cmd_evaluate(args):
    data = _load_dir(args.data, args.domain) if args.data else _generate_instances(args)
    model = load_model(args.model)
    ev = training.evaluate_model(args.domain, model, data, args.k)
    print(f"decision_quality {ev['quality']:.6g}")
    for key in ("mse", "ce", "auc"):
        if ev[key] is not None:
            print(f"{key} {ev[key]:.6g}")
    return 0


def _cmd_benchmark(args):
    cfg = ExperimentConfig(
        domain=args.domain,
        k=args.k,
        gamma=args.gamma,
        depth=args.depth if args.depth is not None else _DEFAULT_DEPTH[args.domain],
        hidden=args.hidden,
        epochs=args.epochs,
        lr=args.lr,
        n_splits=args.splits,
        split_fraction=args.split_fraction,
        master_seed=args.seed,
        out_path=args.out,
        sga_steps=args.sga_steps,
        sga_step_size=args.sga_step_size,
        sga_item_frac=args.sga_item_frac,
        jobs=args.jobs,
        channels=args.channels,
        customers=args.customers,
        density=args.density,
        side_size=args.side_size,
        feature_dim=args.feature_dim,
        communities=args.communities,
        items=args.items,
        topics=args.topics,
        users=args.users,
    )
    if args.instances is not None:
        cfg.n_instances = args.instances
    rows = run_experiment(cfg)
    for entry in summarize(rows, seed=cfg.master_seed):
        q = entry["decision_quality"]
        print(f"{entry['method']}: decision_quality {q[0]:.4f} [{q[1]:.4f}, {q[2]:.4f}]")
    print(f"detail rows: {len(rows)} -> {cfg.out_path}")
    return 0


def _cmd_export(args):
    model = load_model(args.model)
    inst = load_instance(args.instance)
    r2 = export_predictions(model, inst, args.out)
    print(f"out-weight r^2 = {r2:.6g}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "benchmark": _cmd_benchmark,
    "export": _cmd_export,
}


def cli_main(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "config", None):
        # config supplies values only for flags the user did not pass explicitly
        explicit = {
            tok[2:].split("=")[0].replace("-", "_")
            for tok in argv
            if tok.startswith("--")
        }
        try:
            updates = _load_config(args.config, vars(args))
        except FileNotFoundError:
            print(f"IoError: config file {args.config} not found", file=sys.stderr)
            return 1
        except ConfigError as exc:
            print(f"ConfigError: {exc}", file=sys.stderr)
            return 1
        for key, val in updates.items():
            if key not in explicit:
                setattr(args, key, val)
    try:
        return _COMMANDS[args.command](args)
    except OSError as exc:
        print(f"IoError: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
