"""Evaluation metrics: accuracy, ECE, NLL, spread norm and round timing."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from bayesfed import kernels
from bayesfed.errors import UsageError
from bayesfed.vbnn import VbnnModel

NLL_FLOOR = 1e-12
DEFAULT_BINS = 15


def _check_batch(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise UsageError("metrics need a non-empty [B, classes] probability matrix")
    if labels.shape != (probs.shape[0],):
        raise UsageError(f"expected {probs.shape[0]} labels, got shape {labels.shape}")
    return probs, labels.astype(np.int64)


def accuracy(probs, labels) -> float:
    """Fraction of argmax hits; ties go to the lowest class index."""
    probs, labels = _check_batch(probs, labels)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


@dataclass
class ReliabilityBins:
    n_bins: int
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.n_bins + 1) / self.n_bins

    def to_csv(self, path):
        edges = self.edges
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_low", "bin_high", "count", "accuracy", "confidence"])
            for m in range(self.n_bins):
                w.writerow(
                    [
                        f"{edges[m]:.17g}",
                        f"{edges[m + 1]:.17g}",
                        int(self.counts[m]),
                        f"{self.accuracy[m]:.17g}",
                        f"{self.confidence[m]:.17g}",
                    ]
                )


def reliability_bins(probs, labels, n_bins: int = DEFAULT_BINS) -> ReliabilityBins:
    """Bin predictions by confidence into ``(m/M, (m+1)/M]`` intervals.

    Confidence 0 lands in the first bin. Empty bins report zero accuracy
    and confidence.
    """
    if n_bins < 1:
        raise UsageError("need at least one bin")
    probs, labels = _check_batch(probs, labels)
    conf = probs.max(axis=1)
    correct = np.argmax(probs, axis=1) == labels
    counts, conf_sums, acc_sums = kernels.bin_stats(conf, correct, n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(counts > 0, acc_sums / np.maximum(counts, 1), 0.0)
        cmean = np.where(counts > 0, conf_sums / np.maximum(counts, 1), 0.0)
    return ReliabilityBins(n_bins, counts, acc, cmean)


def ece(probs, labels, n_bins: int = DEFAULT_BINS) -> float:
    """Expected calibration error ``sum_m (B_m / n) |acc_m - conf_m|``."""
    bins = reliability_bins(probs, labels, n_bins)
    n = int(bins.counts.sum())
    total = 0.0
    for m in range(n_bins):
        if bins.counts[m]:
            total += bins.counts[m] / n * abs(bins.accuracy[m] - bins.confidence[m])
    return total


def nll(probs, labels) -> float:
    """Mean ``-ln p(true class)``, with probabilities clipped below at 1e-12."""
    probs, labels = _check_batch(probs, labels)
    p = probs[np.arange(labels.size), labels]
    return float(np.mean(-np.log(np.maximum(p, NLL_FLOOR))))


def spread_norm(model: VbnnModel) -> float:
    """Euclidean norm of the stacked per-parameter standard deviations."""
    if not model.variational:
        raise UsageError("spread_norm needs a variational model")
    return float(np.sqrt(sum(float(np.sum(np.exp(p.alpha))) for p in model.params)))


class TpcTimer:
    """Wall-clock timer for one communication round."""

    def __init__(self):
        self.seconds = None
        self._start = None

    def __enter__(self):
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        # perf_counter can tie on very short rounds; keep the report strictly positive
        self.seconds = max(time.perf_counter() - self._start, 1e-9)
        return False


@dataclass
class MetricsReport:
    round: int
    accuracy: float
    ece: float
    nll: float
    spread_norm: float
    tpc_seconds: float
