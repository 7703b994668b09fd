"""Experiment runner: datasets from config, multi-seed runs, CSV persistence."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from bayesfed import __version__, kernels
from bayesfed.config import ExperimentConfig
from bayesfed.data import Dataset, generate_synthetic, load_idx
from bayesfed.errors import BayesFedError, UsageError
from bayesfed.gaussian import (
    GAUSSIAN_TAGS,
    AggregationMethod,
    AggregationWeights,
    GaussianParams,
    aggregate,
)
from bayesfed.metrics import reliability_bins
from bayesfed.simulation import _EVAL, resolve_processes, run_federated, stream
from bayesfed.vbnn import predict_proba

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["run_id", "seed", "round", "acc", "ece", "nll", "spread_norm", "aggregation", "beta_mode", "partition"]
TIMING_COLUMNS = ["run_id", "seed", "round", "tpc_seconds"]
METRIC_COLUMNS = ["acc", "ece", "nll", "spread_norm"]


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


@dataclass
class ResultsRow:
    run_id: str
    seed: int
    round: int
    acc: float
    ece: float
    nll: float
    spread_norm: float
    tpc_seconds: float
    aggregation: str
    beta_mode: str
    partition: str

    def result_fields(self) -> list:
        return [
            self.run_id,
            self.seed,
            self.round,
            fmt(self.acc),
            fmt(self.ece),
            fmt(self.nll),
            fmt(self.spread_norm),
            self.aggregation,
            self.beta_mode,
            self.partition,
        ]


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.kind == "idx":
        return load_idx(ds.train_images, ds.train_labels), load_idx(ds.test_images, ds.test_labels)
    seeds = np.random.SeedSequence(ds.seed).spawn(2)
    train = generate_synthetic(ds.classes, ds.dims, ds.samples_per_class, ds.spread, seeds[0], ds.scale)
    test = generate_synthetic(ds.classes, ds.dims, ds.test_samples_per_class, ds.spread, seeds[1], ds.scale)
    return train, test


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        r["round"] = int(r["round"])
        for k in METRIC_COLUMNS:
            r[k] = float(r[k])
    return rows


def summarize(final_rows: Sequence[ResultsRow]) -> dict:
    """Mean and standard error (sample std / sqrt(n)) per metric across seeds."""
    out = {}
    for k in METRIC_COLUMNS:
        vals = np.array([getattr(r, k) for r in final_rows], dtype=np.float64)
        se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
        out[k] = (float(vals.mean()), se)
    return out


def run_experiment(
    cfg: ExperimentConfig,
    seeds: Sequence[int] | None = None,
    output=None,
    processes: int | None = None,
    echo=print,
) -> list[ResultsRow]:
    """Run once per seed and persist everything under the output directory.

    Writes ``results.csv`` (deterministic columns only), ``timing.csv``
    (wall-clock time per round), ``manifest.json``, one checkpoint per seed
    and, if enabled, the final-round ECE bins per seed. Returns all rows.
    """
    seeds = [cfg.seed] if not seeds else [int(s) for s in seeds]
    out_dir = Path(output if output is not None else cfg.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)
    processes = resolve_processes(processes if processes is not None else cfg.processes)
    train, test = load_datasets(cfg)
    fingerprint = cfg.fingerprint()

    manifest = {
        "config_hash": fingerprint,
        "seeds": seeds,
        "code_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "config": cfg.to_dict(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    rows: list[ResultsRow] = []
    finals: list[ResultsRow] = []
    with open(out_dir / "results.csv", "w", newline="") as rfh, open(out_dir / "timing.csv", "w", newline="") as tfh:
        rw, tw = csv.writer(rfh, lineterminator="\n"), csv.writer(tfh, lineterminator="\n")
        rw.writerow(RESULT_COLUMNS)
        tw.writerow(TIMING_COLUMNS)
        for seed in seeds:
            run_id = f"{fingerprint[:12]}-s{seed}"
            rc = cfg.round_config(seed)

            def record(rep, run_id=run_id, seed=seed, rc=rc):
                row = ResultsRow(
                    run_id,
                    seed,
                    rep.round,
                    rep.accuracy,
                    rep.ece,
                    rep.nll,
                    rep.spread_norm,
                    rep.tpc_seconds,
                    rc.aggregation.tag,
                    rc.beta_mode,
                    cfg.partition.kind,
                )
                rows.append(row)
                rw.writerow(row.result_fields())
                tw.writerow([run_id, seed, rep.round, fmt(rep.tpc_seconds)])
                rfh.flush()
                tfh.flush()

            try:
                server = run_federated(
                    rc,
                    cfg.partition,
                    train,
                    test,
                    hidden=cfg.hidden,
                    processes=processes,
                    checkpoint_path=out_dir / "checkpoints" / f"seed{seed}.bfck",
                    on_round=record,
                )
            except BayesFedError as exc:
                raise BayesFedError(f"run {run_id} (seed {seed}): {exc}") from exc
            finals.append(rows[-1])
            if cfg.dump_ece_bins:
                rng = np.random.default_rng(stream(_EVAL, seed, server.round))
                probs = predict_proba(server.model, test.x, rc.eval_mc_samples, rng)
                reliability_bins(probs, test.y, rc.ece_bins).to_csv(out_dir / f"ece_bins_seed{seed}.csv")

    summary = summarize(finals)
    echo(f"{cfg.round_config().baseline} {cfg.aggregation} over seeds {seeds}, round {finals[-1].round}:")
    for k, (mean, se) in summary.items():
        echo(f"  {k:12s} {mean:.6f} +- {se:.6f}")
    return rows


def parse_clients(specs: Sequence[str]) -> list[GaussianParams]:
    """``"mu,var"`` strings into one-element Gaussians."""
    out = []
    for s in specs:
        try:
            mu, var = (float(v) for v in s.split(","))
        except ValueError as exc:
            raise UsageError(f"client {s!r}: expected 'mu,var'") from exc
        if not var > 0:
            raise UsageError(f"client {s!r}: variance must be positive")
        out.append(GaussianParams.from_variance([mu], [var]))
    return out


def agg_demo(
    clients: Sequence[GaussianParams],
    betas: Sequence[float] | None = None,
    methods: Sequence[str] = (*GAUSSIAN_TAGS, "point"),
    population_size: int = 1_000_000,
    seed: int = 0,
) -> list[tuple[str, float, float]]:
    """``(tag, mu, var)`` per rule; point averaging reports variance 0."""
    w = AggregationWeights(betas) if betas is not None else AggregationWeights.uniform(len(clients))
    out = []
    for tag in methods:
        method = AggregationMethod(tag, population_size if tag == "ppa" else None)
        res = aggregate(method, clients, w, seed)
        var = 0.0 if tag == "point" else float(res.var[0])
        out.append((tag, float(res.mu[0]), var))
    return out
