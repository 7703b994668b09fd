"""Aggregation of factorised Gaussian parameters across clients.

Each client contributes one :class:`GaussianParams` per model (or per
tensor); every rule works element-wise, treating every scalar weight as an
independent univariate Gaussian. Variances are stored as log-variances
``alpha = ln(sigma^2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from bayesfed import kernels
from bayesfed.errors import ShapeError, UsageError

VAR_FLOOR = 1e-12
BETA_TOL = 1e-9

METHOD_TAGS = ("eaa", "gaa", "aalv", "ppa", "cf", "point")
GAUSSIAN_TAGS = ("eaa", "gaa", "aalv", "ppa", "cf")


@dataclass
class GaussianParams:
    """Means and log-variances of one (possibly flattened) tensor."""

    shape: tuple
    mu: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.mu = np.asarray(self.mu, dtype=np.float64).ravel()
        self.alpha = np.asarray(self.alpha, dtype=np.float64).ravel()
        size = math.prod(self.shape)
        if self.mu.size != size or self.alpha.size != size:
            raise ShapeError(
                f"shape {self.shape} needs {size} entries, got mu={self.mu.size} alpha={self.alpha.size}"
            )
        if not np.all(np.isfinite(self.alpha)):
            raise UsageError("log-variances must be finite")

    @classmethod
    def from_variance(cls, mu, var, shape=None) -> "GaussianParams":
        mu = np.asarray(mu, dtype=np.float64)
        var = np.asarray(var, dtype=np.float64)
        if shape is None:
            shape = mu.shape
        return cls(shape, mu, _log_var(var))

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.alpha)

    @property
    def size(self) -> int:
        return self.mu.size

    def copy(self) -> "GaussianParams":
        return GaussianParams(self.shape, self.mu.copy(), self.alpha.copy())


@dataclass
class AggregationWeights:
    betas: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64).ravel()
        if self.betas.size == 0:
            raise UsageError("aggregation weights are empty")
        if np.any(self.betas <= 0) or np.any(self.betas > 1):
            raise UsageError(f"every beta must lie in (0, 1], got {self.betas.tolist()}")
        total = float(self.betas.sum())
        if abs(total - 1.0) > BETA_TOL:
            raise UsageError(f"betas must sum to 1, got {total!r}")

    @classmethod
    def uniform(cls, k: int) -> "AggregationWeights":
        return cls(np.full(k, 1.0 / k))

    def __len__(self):
        return self.betas.size


@dataclass(frozen=True)
class AggregationMethod:
    """Aggregation rule tag; ``population_size`` is required for PPA only."""

    tag: str
    population_size: int | None = field(default=None)

    def __post_init__(self):
        if self.tag not in METHOD_TAGS:
            raise UsageError(f"unknown aggregation method {self.tag!r}; expected one of {METHOD_TAGS}")
        if self.tag == "ppa":
            if self.population_size is None or int(self.population_size) < 1:
                raise UsageError("ppa requires a positive population_size")
        elif self.population_size is not None:
            raise UsageError(f"population_size is only meaningful for ppa, not {self.tag}")

    @property
    def is_gaussian(self) -> bool:
        return self.tag != "point"

    def __str__(self):
        return self.tag


def _log_var(var: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(var, VAR_FLOOR))


def _stack(clients: Sequence[GaussianParams], w: AggregationWeights):
    if len(clients) == 0:
        raise UsageError("cannot aggregate an empty client list")
    if len(clients) != len(w):
        raise ShapeError(f"{len(clients)} clients but {len(w)} weights")
    shape = clients[0].shape
    for i, c in enumerate(clients):
        if c.shape != shape:
            raise ShapeError(f"client {i} has shape {c.shape}, expected {shape}")
    mu = np.stack([c.mu for c in clients])
    alpha = np.stack([c.alpha for c in clients])
    return shape, mu, alpha, w.betas


def _single(clients, w):
    # beta == (1,) makes every closed-form rule the identity; skip the exp/log round trip
    if len(clients) == 1 and len(w) == 1:
        return clients[0].copy()
    return None


def aggregate_eaa(clients: Sequence[GaussianParams], w: AggregationWeights) -> GaussianParams:
    """Weighted average of means and of variances."""
    shape, mu, alpha, betas = _stack(clients, w)
    if (single := _single(clients, w)) is not None:
        return single
    return GaussianParams(
        shape, kernels.weighted_sum(mu, betas), _log_var(kernels.weighted_sum(np.exp(alpha), betas))
    )


def aggregate_gaa(clients: Sequence[GaussianParams], w: AggregationWeights) -> GaussianParams:
    """Sum rule for a weighted sum of independent Gaussians: variances weighted by beta squared."""
    shape, mu, alpha, betas = _stack(clients, w)
    if (single := _single(clients, w)) is not None:
        return single
    return GaussianParams(
        shape, kernels.weighted_sum(mu, betas), _log_var(kernels.weighted_sum(np.exp(alpha), betas * betas))
    )


def aggregate_aalv(clients: Sequence[GaussianParams], w: AggregationWeights) -> GaussianParams:
    """Weighted average of means and of log-variances (a weighted geometric mean of variances)."""
    shape, mu, alpha, betas = _stack(clients, w)
    if (single := _single(clients, w)) is not None:
        return single
    return GaussianParams(shape, kernels.weighted_sum(mu, betas), kernels.weighted_sum(alpha, betas))


def ppa_counts(n: int, betas: np.ndarray) -> np.ndarray:
    """Samples drawn per client: ``round(n * beta)`` with a floor of one."""
    return np.maximum(1, np.floor(n * np.asarray(betas) + 0.5)).astype(np.int64)


def aggregate_ppa(
    clients: Sequence[GaussianParams], w: AggregationWeights, n: int, rng_seed: int = 0
) -> GaussianParams:
    """Population pooling.

    Draws ``round(n * beta_k)`` (at least one) samples from every client's
    Gaussian for each scalar parameter, pools them and returns the pooled
    sample mean and the biased ``1/N`` sample variance, where ``N`` is the
    actual pooled count. Deterministic given ``rng_seed``.
    """
    shape, mu, alpha, betas = _stack(clients, w)
    if n < len(clients):
        raise UsageError(f"population size {n} is smaller than the number of clients {len(clients)}")
    counts = ppa_counts(n, betas)
    mean, var = kernels.ppa_pool(mu, np.exp(0.5 * alpha), counts, rng_seed)
    return GaussianParams(shape, mean, _log_var(var))


def aggregate_cf(clients: Sequence[GaussianParams], w: AggregationWeights) -> GaussianParams:
    """Weighted conflation.

    The mean is the precision-and-beta weighted mean; the variance is
    ``max(beta) / sum_k(beta_k / sigma2_k)``.
    """
    shape, mu, alpha, betas = _stack(clients, w)
    if (single := _single(clients, w)) is not None:
        return single
    num, den = kernels.conflation_sums(mu, alpha, betas)
    return GaussianParams(shape, num / den, _log_var(betas.max() / den))


def aggregate_point(client_points: Sequence[np.ndarray], w: AggregationWeights) -> np.ndarray:
    if len(client_points) == 0:
        raise UsageError("cannot aggregate an empty client list")
    if len(client_points) != len(w):
        raise ShapeError(f"{len(client_points)} clients but {len(w)} weights")
    points = [np.asarray(p, dtype=np.float64).ravel() for p in client_points]
    n = points[0].size
    for i, p in enumerate(points):
        if p.size != n:
            raise ShapeError(f"client {i} has {p.size} entries, expected {n}")
    if len(points) == 1:
        return points[0].copy()
    return kernels.weighted_sum(np.stack(points), w.betas)


def aggregate(
    method: AggregationMethod,
    clients: Sequence[GaussianParams],
    w: AggregationWeights,
    rng_seed: int = 0,
) -> GaussianParams:
    """Dispatch to the configured rule.

    ``point`` averages the means only and returns all-zero log-variances,
    the sentinel carried by deterministic models.
    """
    tag = method.tag
    if tag == "eaa":
        return aggregate_eaa(clients, w)
    if tag == "gaa":
        return aggregate_gaa(clients, w)
    if tag == "aalv":
        return aggregate_aalv(clients, w)
    if tag == "ppa":
        return aggregate_ppa(clients, w, int(method.population_size), rng_seed)
    if tag == "cf":
        return aggregate_cf(clients, w)
    if tag == "point":
        mu = aggregate_point([c.mu for c in clients], w)
        shape = clients[0].shape
        return GaussianParams(shape, mu, np.zeros_like(mu))
    raise UsageError(f"unknown aggregation method {tag!r}")  # pragma: no cover
