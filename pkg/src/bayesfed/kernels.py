"""Inner loops shared by the aggregation rules and the calibration metric.

Every kernel exists twice: a loop version compiled with numba and a
vectorised numpy version. Both accumulate in the same order, so the
closed-form kernels and the ECE binning agree bit for bit between the two
paths. The PPA pooling kernel seeds the same PCG64 generator on both
paths but consumes the draws in a different order (per parameter in the
loop version, per client block in the numpy version), so each path is
deterministic for a given seed while the two do not agree with each other.

Which path is bound to the public names is decided by
:data:`bayesfed._accel.USE_NUMBA`.
"""

import numpy as np

from bayesfed._accel import HAVE_NUMBA, USE_NUMBA, njit

# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def _weighted_sum_np(values, weights):
    out = np.zeros(values.shape[1], dtype=np.float64)
    for k in range(values.shape[0]):
        out += weights[k] * values[k]
    return out


def _conflation_sums_np(mu, alpha, weights):
    num = np.zeros(mu.shape[1], dtype=np.float64)
    den = np.zeros(mu.shape[1], dtype=np.float64)
    for k in range(mu.shape[0]):
        prec = weights[k] * np.exp(-alpha[k])
        num += prec * mu[k]
        den += prec
    return num, den


def _ppa_pool_np(mu, sd, counts, seed):
    n_params = mu.shape[1]
    total = int(counts.sum())
    rng = np.random.Generator(np.random.PCG64(seed))
    mean = np.empty(n_params)
    var = np.empty(n_params)
    # bound the (total, chunk) sample matrix to ~32 MB
    chunk = max(1, (1 << 22) // total)
    for start in range(0, n_params, chunk):
        stop = min(start + chunk, n_params)
        pooled = np.concatenate(
            [
                mu[k, start:stop] + sd[k, start:stop] * rng.standard_normal((int(counts[k]), stop - start))
                for k in range(mu.shape[0])
            ],
            axis=0,
        )
        m = pooled.mean(axis=0)
        mean[start:stop] = m
        var[start:stop] = np.mean((pooled - m) ** 2, axis=0)
    return mean, var


def _bin_stats_np(confidence, correct, n_bins):
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.searchsorted(edges, confidence, side="left") - 1
    idx = np.clip(idx, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
    conf_sums = np.bincount(idx, weights=confidence, minlength=n_bins)
    acc_sums = np.bincount(idx, weights=correct.astype(np.float64), minlength=n_bins)
    return counts, conf_sums, acc_sums


# --------------------------------------------------------------------------
# loop implementations (numba)
# --------------------------------------------------------------------------


@njit
def _weighted_sum_nb(values, weights):
    n_clients, n_params = values.shape
    out = np.zeros(n_params)
    for k in range(n_clients):
        w = weights[k]
        for p in range(n_params):
            out[p] += w * values[k, p]
    return out


@njit
def _conflation_sums_nb(mu, alpha, weights):
    n_clients, n_params = mu.shape
    num = np.zeros(n_params)
    den = np.zeros(n_params)
    for k in range(n_clients):
        w = weights[k]
        for p in range(n_params):
            prec = w * np.exp(-alpha[k, p])
            num[p] += prec * mu[k, p]
            den[p] += prec
    return num, den


@njit
def _ppa_pool_loop(mu, sd, counts, rng):
    n_clients, n_params = mu.shape
    total = 0
    for k in range(n_clients):
        total += counts[k]
    buf = np.empty(total)
    mean = np.empty(n_params)
    var = np.empty(n_params)
    for p in range(n_params):
        i = 0
        for k in range(n_clients):
            for _ in range(counts[k]):
                buf[i] = mu[k, p] + sd[k, p] * rng.standard_normal()
                i += 1
        s = 0.0
        for j in range(total):
            s += buf[j]
        m = s / total
        ss = 0.0
        for j in range(total):
            d = buf[j] - m
            ss += d * d
        mean[p] = m
        var[p] = ss / total
    return mean, var


def _ppa_pool_nb(mu, sd, counts, seed):
    return _ppa_pool_loop(mu, sd, counts, np.random.Generator(np.random.PCG64(seed)))


@njit
def _bin_stats_nb(confidence, correct, n_bins):
    counts = np.zeros(n_bins, dtype=np.int64)
    conf_sums = np.zeros(n_bins)
    acc_sums = np.zeros(n_bins)
    for i in range(confidence.shape[0]):
        c = confidence[i]
        # bin b covers (b/M, (b+1)/M]; start from the ceil guess and fix rounding
        b = int(np.ceil(c * n_bins)) - 1
        if b < 0:
            b = 0
        if b > n_bins - 1:
            b = n_bins - 1
        while b > 0 and c <= b / n_bins:
            b -= 1
        while b < n_bins - 1 and c > (b + 1) / n_bins:
            b += 1
        counts[b] += 1
        conf_sums[b] += c
        acc_sums[b] += 1.0 if correct[i] else 0.0
    return counts, conf_sums, acc_sums


NUMPY_KERNELS = {
    "weighted_sum": _weighted_sum_np,
    "conflation_sums": _conflation_sums_np,
    "ppa_pool": _ppa_pool_np,
    "bin_stats": _bin_stats_np,
}

NUMBA_KERNELS = (
    {
        "weighted_sum": _weighted_sum_nb,
        "conflation_sums": _conflation_sums_nb,
        "ppa_pool": _ppa_pool_nb,
        "bin_stats": _bin_stats_nb,
    }
    if HAVE_NUMBA
    else None
)

_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS
BACKEND = "numba" if USE_NUMBA else "numpy"


def weighted_sum(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Row-weighted sum ``sum_k weights[k] * values[k]`` accumulated in k order."""
    return _ACTIVE["weighted_sum"](
        np.ascontiguousarray(values, dtype=np.float64), np.ascontiguousarray(weights, dtype=np.float64)
    )


def conflation_sums(mu: np.ndarray, alpha: np.ndarray, weights: np.ndarray):
    """Return ``(sum_k w_k mu_k / s2_k, sum_k w_k / s2_k)`` with ``s2 = exp(alpha)``."""
    return _ACTIVE["conflation_sums"](
        np.ascontiguousarray(mu, dtype=np.float64),
        np.ascontiguousarray(alpha, dtype=np.float64),
        np.ascontiguousarray(weights, dtype=np.float64),
    )


def ppa_pool(mu: np.ndarray, sd: np.ndarray, counts: np.ndarray, seed: int):
    """Pool ``counts[k]`` normal draws per client for every parameter.

    Returns the per-parameter sample mean and biased (1/N) sample variance
    of the pooled population.
    """
    return _ACTIVE["ppa_pool"](
        np.ascontiguousarray(mu, dtype=np.float64),
        np.ascontiguousarray(sd, dtype=np.float64),
        np.ascontiguousarray(counts, dtype=np.int64),
        int(seed) % (1 << 32),
    )


def bin_stats(confidence: np.ndarray, correct: np.ndarray, n_bins: int):
    """Per-bin sample counts, confidence sums and hit sums over (0, 1]."""
    return _ACTIVE["bin_stats"](
        np.ascontiguousarray(confidence, dtype=np.float64),
        np.ascontiguousarray(correct, dtype=np.bool_),
        int(n_bins),
    )
