"""Federated training loop: client sampling, local updates, server aggregation.

Randomness is drawn from independent streams keyed by
``(purpose, master seed, round, client id)``, so a round's outcome does
not depend on how many worker processes run the client updates or in
which order they finish.
"""

from __future__ import annotations

import logging
import math
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from bayesfed import metrics
from bayesfed.data import Dataset
from bayesfed.errors import ClientUpdateError, UsageError
from bayesfed.gaussian import AggregationMethod, AggregationWeights, aggregate
from bayesfed.partition import PartitionSpec, partition
from bayesfed.vbnn import (
    DETERMINISTIC,
    VARIATIONAL,
    OptimizerState,
    VbnnModel,
    backward,
    elbo_loss,
    init_model,
    mlp_spec,
    point_snapshot,
    predict_proba,
    sample_weights,
    save_checkpoint,
    sgd_step,
)

log = logging.getLogger(__name__)

PROCESSES_ENV = "BAYESFED_PROCESSES"
BETA_MODES = ("uniform", "proportional")
KL_WEIGHTINGS = ("samples", "batches")

# stream purposes
_INIT, _PARTITION, _SAMPLE, _CLIENT, _AGG, _EVAL = range(6)


def stream(purpose: int, seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([purpose, int(seed), *[int(k) for k in keys]])


def stream_int(purpose: int, seed: int, *keys: int) -> int:
    return int(stream(purpose, seed, *keys).generate_state(1, np.uint32)[0])


@dataclass
class RoundConfig:
    total_clients: int = 10
    fraction: float = 1.0
    rounds: int = 50
    local_epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    aggregation: AggregationMethod = field(default_factory=lambda: AggregationMethod("aalv"))
    beta_mode: str = "uniform"
    seed: int = 0
    eval_mc_samples: int = 10
    eval_stride: int = 1
    ece_bins: int = metrics.DEFAULT_BINS
    kl_weighting: str = "samples"

    def __post_init__(self):
        if isinstance(self.aggregation, str):
            self.aggregation = AggregationMethod(self.aggregation)
        if self.total_clients < 1:
            raise UsageError("total_clients must be positive")
        if not 0 < self.fraction <= 1:
            raise UsageError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise UsageError("rounds, local_epochs and batch_size must be positive")
        if self.beta_mode not in BETA_MODES:
            raise UsageError(f"beta_mode must be one of {BETA_MODES}")
        if self.kl_weighting not in KL_WEIGHTINGS:
            raise UsageError(f"kl_weighting must be one of {KL_WEIGHTINGS}")
        if self.eval_mc_samples < 1 or self.eval_stride < 1 or self.ece_bins < 1:
            raise UsageError("eval_mc_samples, eval_stride and ece_bins must be positive")

    @property
    def num_active(self) -> int:
        return num_active(self.total_clients, self.fraction)

    @property
    def mode(self) -> str:
        return VARIATIONAL if self.aggregation.is_gaussian else DETERMINISTIC

    @property
    def baseline(self) -> str:
        """FED / FEDAVG for point averaging, FVBA / FVBWA for the Gaussian rules."""
        if self.aggregation.is_gaussian:
            return "FVBA" if self.beta_mode == "uniform" else "FVBWA"
        return "FED" if self.beta_mode == "uniform" else "FEDAVG"


def num_active(total_clients: int, fraction: float) -> int:
    return max(1, int(math.floor(total_clients * fraction + 0.5)))


@dataclass
class ClientState:
    id: int
    indices: np.ndarray

    @property
    def size(self) -> int:
        return int(self.indices.size)


@dataclass
class ServerState:
    model: VbnnModel
    round: int = 0
    history: list = field(default_factory=list)
    last_tpc: float | None = None


def sample_active_clients(total_clients: int, fraction: float, t: int, seed: int) -> list[int]:
    """``K = max(1, round(C * fraction))`` distinct client ids, sorted; deterministic per ``(seed, t)``."""
    if not 0 < fraction <= 1:
        raise UsageError(f"fraction must lie in (0, 1], got {fraction}")
    k = num_active(total_clients, fraction)
    if k >= total_clients:
        return list(range(total_clients))
    rng = np.random.default_rng(stream(_SAMPLE, seed, t))
    return sorted(int(i) for i in rng.choice(total_clients, size=k, replace=False))


def compute_betas(sizes: Sequence[int], beta_mode: str) -> AggregationWeights:
    """Uniform ``1/K`` or dataset-size proportional, normalised over the active clients."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0:
        raise UsageError("no active clients")
    if beta_mode == "uniform":
        return AggregationWeights(np.full(sizes.size, 1.0 / sizes.size))
    if beta_mode == "proportional":
        return AggregationWeights(sizes / sizes.sum())
    raise UsageError(f"unknown beta_mode {beta_mode!r}")


def client_update(
    global_model: VbnnModel,
    client: ClientState,
    config: RoundConfig,
    data: Dataset,
    t: int,
    epochs: int | None = None,
) -> VbnnModel:
    """Train a copy of the global model on the client's shard for E epochs.

    With ``kl_weighting="samples"`` each minibatch loss is
    ``KL / |D_k| + mean NLL``, so an epoch's summed loss is the local
    free energy divided by the batch size. ``"batches"`` scales the KL by
    ``1 / n_batches`` instead, which weights it ``batch_size`` times more
    heavily against the data. ``epochs`` overrides ``config.local_epochs``.
    """
    if client.size == 0:
        raise UsageError(f"client {client.id} has no data")
    model = global_model.copy()
    epochs = config.local_epochs if epochs is None else epochs
    rng = np.random.default_rng(stream(_CLIENT, config.seed, t, client.id))
    opt = OptimizerState.for_model(model, config.lr, config.momentum, config.weight_decay)
    x = data.x[client.indices]
    y = data.y[client.indices]
    n = client.size
    bs = config.batch_size
    n_batches = -(-n // bs)
    kl_scale = 1.0 / n if config.kl_weighting == "samples" else 1.0 / n_batches
    for _ in range(epochs):
        order = rng.permutation(n)
        for b in range(n_batches):
            sel = order[b * bs : (b + 1) * bs]
            snap = sample_weights(model, rng) if model.variational else point_snapshot(model)
            _, cache = elbo_loss(model, snap, x[sel], y[sel], kl_scale)
            sgd_step(model, opt, backward(model, cache))
    return model


# -- worker pool -------------------------------------------------------------

_WORKER_DATA: Dataset | None = None


def _init_worker(x, y):
    global _WORKER_DATA
    _WORKER_DATA = Dataset(x, y)


def _noop():
    return None


def _worker_update(global_model, client, config, t):
    return client_update(global_model, client, config, _WORKER_DATA, t)


def resolve_processes(processes: int | None) -> int:
    """The ``BAYESFED_PROCESSES`` environment variable overrides the configured pool size."""
    env = os.environ.get(PROCESSES_ENV)
    if env:
        processes = int(env)
    processes = 1 if processes is None else int(processes)
    if processes < 1:
        raise UsageError("processes must be >= 1")
    return processes


class ClientRunner:
    """Runs client updates serially (``processes=1``) or on a process pool.

    Workers get the training set once at start-up; each task ships only the
    global model, the client's index list and the round config.
    """

    def __init__(self, data: Dataset, processes: int = 1):
        self.data = data
        self.processes = int(processes)
        self._pool = None
        if self.processes > 1:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ.setdefault(var, "1")
            self._pool = ProcessPoolExecutor(
                max_workers=self.processes,
                mp_context=mp.get_context("spawn"),
                initializer=_init_worker,
                initargs=(data.x, data.y),
            )
            # start every worker now so spawn cost is not billed to the first round
            for f in [self._pool.submit(_noop) for _ in range(self.processes)]:
                f.result()

    def run(self, global_model, clients: Sequence[ClientState], config, t) -> list[VbnnModel]:
        """Local models in the order of ``clients``."""
        if self._pool is None:
            out = []
            for c in clients:
                try:
                    out.append(client_update(global_model, c, config, self.data, t))
                except Exception as exc:
                    raise ClientUpdateError(c.id, exc) from exc
            return out
        futures = [self._pool.submit(_worker_update, global_model, c, config, t) for c in clients]
        out = []
        for c, fut in zip(clients, futures):
            try:
                out.append(fut.result())
            except Exception as exc:
                for f in futures:
                    f.cancel()
                raise ClientUpdateError(c.id, exc) from exc
        return out

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True, cancel_futures=True)
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


# -- rounds ------------------------------------------------------------------


def evaluate(model: VbnnModel, test: Dataset, config: RoundConfig, t: int, tpc: float):
    rng = np.random.default_rng(stream(_EVAL, config.seed, t))
    probs = predict_proba(model, test.x, config.eval_mc_samples, rng)
    return metrics.MetricsReport(
        round=t,
        accuracy=metrics.accuracy(probs, test.y),
        ece=metrics.ece(probs, test.y, config.ece_bins),
        nll=metrics.nll(probs, test.y),
        spread_norm=metrics.spread_norm(model) if model.variational else 0.0,
        tpc_seconds=tpc,
    )


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    config: RoundConfig,
    runner: ClientRunner,
    test: Dataset | None = None,
) -> ServerState:
    """One communication round: sample, train locally, aggregate, install.

    Local models are aggregated in ascending client id. When ``test`` is
    given and the round is due (every ``eval_stride`` rounds and always the
    last), a :class:`MetricsReport` is appended to ``server.history``.
    """
    t = server.round + 1
    with metrics.TpcTimer() as timer:
        active = sample_active_clients(config.total_clients, config.fraction, t, config.seed)
        chosen = [clients[i] for i in active]
        local = runner.run(server.model, chosen, config, t)
        betas = compute_betas([c.size for c in chosen], config.beta_mode)
        agg = aggregate(config.aggregation, [m.flat() for m in local], betas, stream_int(_AGG, config.seed, t))
        new_model = server.model.copy()
        new_model.set_flat(agg)
        server.model = new_model
        server.round = t
    server.last_tpc = timer.seconds
    log.debug("round %d: %d clients, %.3fs", t, len(active), timer.seconds)
    if test is not None and (t % config.eval_stride == 0 or t == config.rounds):
        server.history.append(evaluate(server.model, test, config, t, timer.seconds))
    return server


def make_clients(train: Dataset, spec: PartitionSpec, seed: int) -> list[ClientState]:
    parts = partition(train.y, spec, stream_int(_PARTITION, seed))
    return [ClientState(i, idx) for i, idx in enumerate(parts)]


def run_federated(
    config: RoundConfig,
    spec: PartitionSpec,
    train: Dataset,
    test: Dataset,
    hidden: Sequence[int] = (400, 120, 84),
    processes: int = 1,
    checkpoint_path=None,
    on_round: Callable[[metrics.MetricsReport], None] | None = None,
) -> ServerState:
    """Full T-round run. Returns the final server state; ``history`` holds the per-round metrics."""
    if spec.num_clients != config.total_clients:
        raise UsageError(f"partition has {spec.num_clients} clients, round config {config.total_clients}")
    n_classes = max(train.n_classes, test.n_classes)
    specs = mlp_spec(train.dim, hidden, n_classes)
    model = init_model(specs, config.mode, stream_int(_INIT, config.seed))
    clients = make_clients(train, spec, config.seed)
    server = ServerState(model)
    with ClientRunner(train, processes) as runner:
        for _ in range(config.rounds):
            seen = len(server.history)
            run_round(server, clients, config, runner, test)
            if on_round is not None and len(server.history) > seen:
                on_round(server.history[-1])
    if checkpoint_path is not None:
        save_checkpoint(server.model, checkpoint_path)
    return server
