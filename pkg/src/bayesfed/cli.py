"""Command line entry point: ``bayesfed run | agg-demo | partition-stats``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

import numpy as np

from bayesfed.config import load_config
from bayesfed.errors import BayesFedError
from bayesfed.experiment import agg_demo, load_datasets, parse_clients, run_experiment
from bayesfed.gaussian import METHOD_TAGS
from bayesfed.partition import label_histograms, partition
from bayesfed.simulation import _PARTITION, stream_int


def parse_seeds(values) -> list[int]:
    """Accepts ``3``, ``0-4`` and ``0,2,5`` forms, repeated or combined."""
    out = []
    for v in values or []:
        for part in str(v).split(","):
            if "-" in part.strip()[1:]:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            elif part.strip():
                out.append(int(part))
    return out


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.rounds is not None:
        cfg = dataclasses.replace(cfg, rounds=args.rounds)
    if args.output is not None:
        cfg = dataclasses.replace(cfg, output=args.output)
    if args.processes is not None:
        cfg = dataclasses.replace(cfg, processes=args.processes)
    seeds = parse_seeds(args.seed) or [cfg.seed]
    run_experiment(cfg, seeds)
    print(f"results written to {cfg.output}")
    return 0


def cmd_agg_demo(args) -> int:
    clients = parse_clients(args.client)
    betas = _floats(args.beta) if args.beta else None
    methods = args.method or [m for m in METHOD_TAGS]
    rows = agg_demo(clients, betas, methods, args.population_size, args.seed)
    print(f"{'rule':6s} {'mu':>22s} {'var':>22s}")
    for tag, mu, var in rows:
        print(f"{tag:6s} {mu:22.15g} {var:22.15g}")
    return 0


def cmd_partition_stats(args) -> int:
    cfg = load_config(args.config)
    train, _ = load_datasets(cfg)
    seed = parse_seeds(args.seed)[0] if args.seed else cfg.seed
    parts = partition(train.y, cfg.partition, stream_int(_PARTITION, seed))
    hist = label_histograms(train.y, parts)
    print(f"{cfg.partition.kind} partition, {len(parts)} clients, seed {seed}")
    header = "client " + " ".join(f"{c:>6d}" for c in range(hist.shape[1])) + "   total"
    print(header)
    for k, row in enumerate(hist):
        print(f"{k:6d} " + " ".join(f"{v:6d}" for v in row) + f"  {int(row.sum()):6d}")
    frac = hist.max(axis=1) / np.maximum(hist.sum(axis=1), 1)
    print(f"mean share of each client's majority label: {frac.mean():.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bayesfed", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a federated experiment from a YAML config")
    r.add_argument("config")
    r.add_argument("--seed", action="append", help="seed, range (0-4) or list (0,1,2); repeatable")
    r.add_argument("--processes", type=int, help="worker processes (BAYESFED_PROCESSES overrides)")
    r.add_argument("--output", help="output directory")
    r.add_argument("--rounds", type=int, help="override the number of communication rounds")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("agg-demo", help="aggregate scalar Gaussians with every rule")
    a.add_argument("--client", action="append", required=True, metavar="MU,VAR")
    a.add_argument("--beta", help="comma-separated weights (default uniform)")
    a.add_argument("--method", action="append", choices=METHOD_TAGS)
    a.add_argument("--population-size", type=int, default=1_000_000)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_agg_demo)

    s = sub.add_parser("partition-stats", help="per-client label histograms for a config's partition")
    s.add_argument("config")
    s.add_argument("--seed", action="append")
    s.set_defaults(func=cmd_partition_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (BayesFedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
