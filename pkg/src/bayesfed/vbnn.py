"""Variational Bayesian MLP with mean-field Gaussian weights.

Every weight and bias is a univariate Gaussian stored as ``(mu, alpha)``
with ``alpha = ln(sigma^2)``. Training uses one reparameterised draw
``w = mu + sigma * eps`` per forward pass and minimises

    kl_scale * KL(q || N(0, 1)) + mean cross-entropy of the batch.

The same class also holds deterministic models (``mode="deterministic"``):
only the means are used and the log-variances are ignored.

Gradients are computed by hand. The chain rule through the sampling step
gives ``dw/dmu = 1`` and ``dw/dalpha = 0.5 * sigma * eps``; the KL term
contributes ``mu`` and ``0.5 * (sigma^2 - 1)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from bayesfed.errors import ShapeError, UsageError
from bayesfed.gaussian import GaussianParams

VARIATIONAL = "variational"
DETERMINISTIC = "deterministic"
MODES = (VARIATIONAL, DETERMINISTIC)
ACTIVATIONS = ("relu", "none")

ALPHA_INIT = -5.0

CHECKPOINT_MAGIC = b"BFCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise UsageError(f"layer dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class Prior:
    """Fixed standard-normal prior over every scalar parameter."""

    mean: float = 0.0
    variance: float = 1.0


PRIOR = Prior()


def mlp_spec(input_dim: int, hidden: Sequence[int], classes: int) -> list[LayerSpec]:
    """ReLU MLP ending in a linear logits layer."""
    dims = [int(input_dim), *[int(h) for h in hidden], int(classes)]
    n = len(dims) - 1
    return [LayerSpec(dims[i], dims[i + 1], "relu" if i < n - 1 else "none") for i in range(n)]


def _check_specs(specs: Sequence[LayerSpec]):
    if not specs:
        raise UsageError("a model needs at least one layer")
    for i in range(1, len(specs)):
        if specs[i - 1].out_dim != specs[i].in_dim:
            raise UsageError(
                f"layer {i - 1} outputs {specs[i - 1].out_dim} but layer {i} expects {specs[i].in_dim}"
            )
    if specs[-1].activation != "none":
        raise UsageError("the final layer must not have an activation")


@dataclass
class VbnnModel:
    """Ordered dense layers. ``params`` holds ``[W0, b0, W1, b1, ...]``."""

    specs: list[LayerSpec]
    params: list[GaussianParams]
    mode: str = VARIATIONAL
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise UsageError(f"unknown model mode {self.mode!r}")
        _check_specs(self.specs)
        if len(self.params) != 2 * len(self.specs):
            raise ShapeError(f"expected {2 * len(self.specs)} tensors, got {len(self.params)}")
        for i, s in enumerate(self.specs):
            if self.params[2 * i].shape != (s.out_dim, s.in_dim) or self.params[2 * i + 1].shape != (s.out_dim,):
                raise ShapeError(f"layer {i} tensors do not match {s}")

    @property
    def variational(self) -> bool:
        return self.mode == VARIATIONAL

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def weight(self, i: int) -> GaussianParams:
        return self.params[2 * i]

    def bias(self, i: int) -> GaussianParams:
        return self.params[2 * i + 1]

    def copy(self) -> "VbnnModel":
        return VbnnModel(list(self.specs), [p.copy() for p in self.params], self.mode)

    def flat(self) -> GaussianParams:
        """All parameters concatenated into one flat Gaussian."""
        mu = np.concatenate([p.mu for p in self.params])
        alpha = np.concatenate([p.alpha for p in self.params])
        return GaussianParams((mu.size,), mu, alpha)

    def set_flat(self, flat: GaussianParams) -> "VbnnModel":
        if flat.size != self.n_params:
            raise ShapeError(f"flat parameter vector has {flat.size} entries, model has {self.n_params}")
        start = 0
        for p in self.params:
            stop = start + p.size
            p.mu[:] = flat.mu[start:stop]
            p.alpha[:] = flat.alpha[start:stop]
            start = stop
        self.version += 1
        return self

    def point_weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [
            (self.weight(i).mu.reshape(s.out_dim, s.in_dim), self.bias(i).mu) for i, s in enumerate(self.specs)
        ]


def init_model(specs: Sequence[LayerSpec], mode: str = VARIATIONAL, rng_seed=0) -> VbnnModel:
    """Means ~ U(-1/sqrt(in_dim), 1/sqrt(in_dim)); log-variances start at -5.

    Deterministic models carry all-zero log-variances as a sentinel.
    """
    specs = list(specs)
    _check_specs(specs)
    if mode not in MODES:
        raise UsageError(f"unknown model mode {mode!r}")
    rng = np.random.default_rng(rng_seed)
    alpha0 = ALPHA_INIT if mode == VARIATIONAL else 0.0
    params = []
    for s in specs:
        bound = 1.0 / np.sqrt(s.in_dim)
        for shape in ((s.out_dim, s.in_dim), (s.out_dim,)):
            mu = rng.uniform(-bound, bound, size=shape)
            params.append(GaussianParams(shape, mu, np.full(mu.size, alpha0)))
    return VbnnModel(specs, params, mode)


@dataclass
class Snapshot:
    """One set of point weights, plus the noise that produced it."""

    weights: list[tuple[np.ndarray, np.ndarray]]
    eps: list[np.ndarray] | None = None  # flat noise per tensor, same order as model.params
    model_version: int = -1


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_weights(model: VbnnModel, rng=None, eps: Sequence[np.ndarray] | None = None) -> Snapshot:
    """Draw ``w = mu + exp(alpha / 2) * eps`` for every scalar parameter.

    ``rng`` is a seed or a ``numpy.random.Generator``. Passing ``eps``
    explicitly (one flat array per tensor) bypasses the generator.
    """
    if not model.variational:
        raise UsageError("sample_weights needs a variational model")
    if eps is None:
        rng = _as_rng(rng)
        eps = [rng.standard_normal(p.size) for p in model.params]
    else:
        eps = [np.asarray(e, dtype=np.float64).ravel() for e in eps]
        if len(eps) != len(model.params) or any(e.size != p.size for e, p in zip(eps, model.params)):
            raise ShapeError("eps does not match the model's parameter layout")
    flat = [p.mu + np.exp(0.5 * p.alpha) * e for p, e in zip(model.params, eps)]
    weights = [
        (flat[2 * i].reshape(s.out_dim, s.in_dim), flat[2 * i + 1]) for i, s in enumerate(model.specs)
    ]
    return Snapshot(weights, list(eps), model.version)


def point_snapshot(model: VbnnModel) -> Snapshot:
    return Snapshot(model.point_weights(), None, model.version)


def _weights_of(model, weights):
    if weights is None:
        return model.point_weights()
    if isinstance(weights, Snapshot):
        return weights.weights
    return weights


def _forward(model, weights, x):
    if x.ndim != 2 or x.shape[1] != model.specs[0].in_dim:
        raise ShapeError(f"inputs of shape {x.shape} do not match input dim {model.specs[0].in_dim}")
    acts = [x]
    pre = []
    h = x
    for s, (w, b) in zip(model.specs, weights):
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if s.activation == "relu" else z
        acts.append(h)
    return pre, acts


def forward(model: VbnnModel, weights=None, x=None) -> np.ndarray:
    """Logits for a batch ``x`` of shape ``[B, in_dim]``.

    ``weights`` is a :class:`Snapshot`, a list of ``(W, b)`` pairs, or
    ``None`` for the model's means.
    """
    x = np.asarray(x, dtype=np.float64)
    _, acts = _forward(model, _weights_of(model, weights), x)
    return acts[-1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def kl_to_prior(model: VbnnModel) -> float:
    """Closed-form ``KL(N(mu, sigma^2) || N(0, 1))`` summed over all parameters."""
    if not model.variational:
        raise UsageError("kl_to_prior needs a variational model")
    total = 0.0
    for p in model.params:
        total += 0.5 * float(np.sum(p.mu**2 + np.exp(p.alpha) - p.alpha - 1.0))
    return total


@dataclass
class LossCache:
    model_id: int
    model_version: int
    snapshot: Snapshot
    pre: list
    acts: list
    probs: np.ndarray
    labels: np.ndarray
    kl_scale: float


def _check_labels(y, n_classes, n_rows):
    y = np.asarray(y)
    if y.shape != (n_rows,):
        raise ShapeError(f"expected {n_rows} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(y != np.round(y)):
            raise UsageError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise UsageError(f"labels must lie in [0, {n_classes})")
    return y


def elbo_loss(model: VbnnModel, snapshot: Snapshot, x, y, kl_scale: float = 1.0):
    """Minibatch objective and the cache needed by :func:`backward`.

    Variational: ``kl_scale * KL + mean NLL`` using the given snapshot.
    Deterministic: plain mean cross-entropy; ``kl_scale`` is ignored.
    """
    x = np.asarray(x, dtype=np.float64)
    y = _check_labels(y, model.specs[-1].out_dim, x.shape[0])
    pre, acts = _forward(model, snapshot.weights, x)
    logp = log_softmax(acts[-1])
    nll = -float(np.mean(logp[np.arange(y.size), y]))
    kl_scale = float(kl_scale) if model.variational else 0.0
    loss = nll
    if model.variational and kl_scale != 0.0:
        loss = kl_scale * kl_to_prior(model) + nll
    cache = LossCache(id(model), model.version, snapshot, pre, acts, np.exp(logp), y, kl_scale)
    return loss, cache


@dataclass
class Gradients:
    """Flat gradients per tensor, in ``model.params`` order. ``alpha`` is None for deterministic models."""

    mu: list[np.ndarray]
    alpha: list[np.ndarray] | None


def backward(model: VbnnModel, cache: LossCache) -> Gradients:
    if cache.model_id != id(model) or cache.model_version != model.version:
        raise UsageError("stale loss cache: the model changed after the forward pass")
    b = cache.labels.size
    dz = cache.probs.copy()
    dz[np.arange(b), cache.labels] -= 1.0
    dz /= b
    dw_flat = [None] * len(model.params)
    for i in range(len(model.specs) - 1, -1, -1):
        a_prev = cache.acts[i]
        dw_flat[2 * i] = (dz.T @ a_prev).ravel()
        dw_flat[2 * i + 1] = dz.sum(axis=0)
        if i > 0:
            w = cache.snapshot.weights[i][0]
            dz = (dz @ w) * (cache.pre[i - 1] > 0)

    if not model.variational:
        return Gradients(dw_flat, None)

    eps = cache.snapshot.eps
    if eps is None:
        raise UsageError("variational backward needs the snapshot's noise")
    g_mu, g_alpha = [], []
    s = cache.kl_scale
    for p, dw, e in zip(model.params, dw_flat, eps):
        sigma = np.exp(0.5 * p.alpha)
        gm = dw.copy()
        ga = dw * (0.5 * sigma * e)
        if s != 0.0:
            gm += s * p.mu
            ga += s * 0.5 * (sigma * sigma - 1.0)
        g_mu.append(gm)
        g_alpha.append(ga)
    return Gradients(g_mu, g_alpha)


@dataclass
class OptimizerState:
    """SGD with momentum; weight decay applies to means only."""

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    vel_mu: list[np.ndarray] = field(default_factory=list)
    vel_alpha: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_model(cls, model: VbnnModel, lr=0.01, momentum=0.9, weight_decay=1e-5) -> "OptimizerState":
        return cls(
            lr,
            momentum,
            weight_decay,
            [np.zeros(p.size) for p in model.params],
            [np.zeros(p.size) for p in model.params] if model.variational else [],
        )


def sgd_step(model: VbnnModel, state: OptimizerState, grads: Gradients) -> VbnnModel:
    """In-place update ``v <- m*v + g + wd*theta; theta <- theta - lr*v``."""
    if len(grads.mu) != len(model.params) or len(state.vel_mu) != len(model.params):
        raise ShapeError("gradient / optimizer layout does not match the model")
    for i, p in enumerate(model.params):
        v = state.vel_mu[i]
        v *= state.momentum
        v += grads.mu[i]
        if state.weight_decay:
            v += state.weight_decay * p.mu
        p.mu -= state.lr * v
    if model.variational and grads.alpha is not None:
        for i, p in enumerate(model.params):
            v = state.vel_alpha[i]
            v *= state.momentum
            v += grads.alpha[i]
            p.alpha -= state.lr * v
    model.version += 1
    return model


def predict_proba(model: VbnnModel, x, s: int = 10, rng=None) -> np.ndarray:
    """Monte Carlo predictive: mean of ``softmax(forward)`` over ``s`` weight draws."""
    if s < 1:
        raise UsageError("need at least one Monte Carlo sample")
    x = np.asarray(x, dtype=np.float64)
    if not model.variational:
        return softmax(forward(model, None, x))
    rng = _as_rng(rng)
    probs = np.zeros((x.shape[0], model.specs[-1].out_dim))
    for _ in range(s):
        probs += softmax(forward(model, sample_weights(model, rng), x))
    return probs / s


def save_checkpoint(model: VbnnModel, path) -> Path:
    """Binary checkpoint: magic, version, JSON header, then little-endian float64 mu/alpha per tensor."""
    path = Path(path)
    header = json.dumps(
        {
            "mode": model.mode,
            "layers": [{"in_dim": s.in_dim, "out_dim": s.out_dim, "activation": s.activation} for s in model.specs],
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for p in model.params:
            fh.write(p.mu.astype("<f8").tobytes())
            fh.write(p.alpha.astype("<f8").tobytes())
    return path


def load_checkpoint(path) -> VbnnModel:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise UsageError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise UsageError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen])
    specs = [LayerSpec(**layer) for layer in header["layers"]]
    offset = 12 + hlen
    params = []
    for s in specs:
        for shape in ((s.out_dim, s.in_dim), (s.out_dim,)):
            n = int(np.prod(shape))
            mu = np.frombuffer(data, "<f8", n, offset).astype(np.float64)
            offset += 8 * n
            alpha = np.frombuffer(data, "<f8", n, offset).astype(np.float64)
            offset += 8 * n
            params.append(GaussianParams(shape, mu, alpha))
    if offset != len(data):
        raise UsageError(f"{path}: trailing or missing bytes")
    return VbnnModel(specs, params, header["mode"])
