"""Time the numba and numpy kernel paths side by side.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from bayesfed import kernels


def cases(rng):
    k, p = 10, 200_000
    mu = rng.normal(size=(k, p))
    alpha = rng.normal(-4, 1, size=(k, p))
    w = np.full(k, 1 / k)
    sd = np.exp(0.5 * alpha[:, :2000])
    counts = np.full(k, 100, dtype=np.int64)
    conf = rng.uniform(size=1_000_000)
    correct = rng.uniform(size=conf.size) < 0.7
    return {
        "weighted_sum  10x200k": ("weighted_sum", (mu, w)),
        "conflation    10x200k": ("conflation_sums", (mu, alpha, w)),
        "ppa_pool 1000 x 2k": ("ppa_pool", (mu[:, :2000], sd, counts, 1)),
        "bin_stats 1M, 15 bins": ("bin_stats", (conf, correct, 15)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.NUMBA_KERNELS is None:
        print("numba unavailable; only the numpy path exists")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, (name, argv) in cases(rng).items():
        row = []
        for table in (kernels.NUMPY_KERNELS, kernels.NUMBA_KERNELS):
            fn = table[name]
            fn(*argv)  # compile / warm caches
            row.append(min(timeit.repeat(lambda: fn(*argv), number=1, repeat=args.repeat)) * 1e3)
        print(f"{label:24s} {row[0]:10.2f} {row[1]:10.2f} {row[0] / row[1]:8.2f}x")


if __name__ == "__main__":
    main()
