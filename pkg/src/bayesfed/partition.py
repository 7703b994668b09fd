"""Splitting a labelled training set across clients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bayesfed.errors import UsageError

PARTITION_KINDS = ("iid", "dirichlet")


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "iid"
    num_clients: int = 10
    concentration: float = 0.5

    def __post_init__(self):
        if self.kind not in PARTITION_KINDS:
            raise UsageError(f"unknown partition kind {self.kind!r}")
        if self.num_clients < 1:
            raise UsageError("num_clients must be positive")
        if not self.concentration > 0:
            raise UsageError("dirichlet concentration must be positive")


def _check(labels, n_clients):
    labels = np.asarray(labels)
    if n_clients < 1:
        raise UsageError("need at least one client")
    if n_clients > labels.size:
        raise UsageError(f"{n_clients} clients but only {labels.size} samples")
    return labels


def partition_iid(labels, n_clients: int, rng_seed=0) -> list[np.ndarray]:
    """Label-balanced split.

    Each label's indices are shuffled and dealt round-robin; the dealing
    position carries over between labels so client sizes also differ by at
    most one.
    """
    labels = _check(labels, n_clients)
    rng = np.random.default_rng(rng_seed)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    pos = 0
    for lab in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == lab))
        for i in idx:
            buckets[pos % n_clients].append(int(i))
            pos += 1
    return [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]


def partition_dirichlet(labels, n_clients: int, concentration: float = 0.5, rng_seed=0) -> list[np.ndarray]:
    """Label-skewed split: each label's samples are divided by a Dir(concentration) draw.

    Clients left empty receive one sample taken from the currently largest
    client.
    """
    labels = _check(labels, n_clients)
    if not concentration > 0:
        raise UsageError("dirichlet concentration must be positive")
    rng = np.random.default_rng(rng_seed)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for lab in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == lab))
        props = rng.dirichlet(np.full(n_clients, float(concentration)))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].extend(int(i) for i in part)
    for k in range(n_clients):
        if not buckets[k]:
            donor = max(range(n_clients), key=lambda j: (len(buckets[j]), -j))
            buckets[k].append(buckets[donor].pop())
    return [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]


def partition(labels, spec: PartitionSpec, rng_seed=0) -> list[np.ndarray]:
    if spec.kind == "iid":
        return partition_iid(labels, spec.num_clients, rng_seed)
    return partition_dirichlet(labels, spec.num_clients, spec.concentration, rng_seed)


def label_histograms(labels, parts, n_classes=None) -> np.ndarray:
    """``[clients, classes]`` count matrix."""
    labels = np.asarray(labels)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    return np.stack([np.bincount(labels[p], minlength=n_classes) for p in parts])
