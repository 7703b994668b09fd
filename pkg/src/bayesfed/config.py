"""Experiment configuration: YAML in, validated dataclasses out.

Example::

    dataset:
      kind: synthetic
      classes: 3
      dims: 10
      samples_per_class: 500
      spread: 0.3
    partition: {kind: dirichlet, num_clients: 10, concentration: 0.5}
    model: {hidden: [32]}
    aggregation: ppa
    population_size: 1000
    beta_mode: proportional

Unknown keys are rejected. Relative IDX paths resolve against the config
file's directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from bayesfed.errors import BayesFedError, ConfigError
from bayesfed.gaussian import AggregationMethod, METHOD_TAGS
from bayesfed.partition import PartitionSpec
from bayesfed.simulation import RoundConfig

DATASET_KINDS = ("synthetic", "idx")
IDX_KEYS = ("train_images", "train_labels", "test_images", "test_labels")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    # synthetic
    classes: int = 3
    dims: int = 10
    samples_per_class: int = 500
    test_samples_per_class: int = 200
    spread: float = 0.3
    scale: float = 1.0
    seed: int = 0
    # idx
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def to_dict(self) -> dict:
        if self.kind == "idx":
            return {"kind": "idx", **{k: getattr(self, k) for k in IDX_KEYS}}
        d = dataclasses.asdict(self)
        for k in IDX_KEYS:
            d.pop(k)
        return d


_SYNTHETIC_KEYS = {"kind", "classes", "dims", "samples_per_class", "test_samples_per_class", "spread", "scale", "seed"}
_IDX_ALLOWED = {"kind", *IDX_KEYS}


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    aggregation: str
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    hidden: list = field(default_factory=lambda: [400, 120, 84])
    population_size: int | None = None
    fraction: float = 1.0
    rounds: int = 50
    local_epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    beta_mode: str = "uniform"
    kl_weighting: str = "samples"
    seed: int = 0
    eval_mc_samples: int = 10
    eval_stride: int = 1
    ece_bins: int = 15
    dump_ece_bins: bool = False
    output: str = "results"
    processes: int = 1

    def round_config(self, seed: int | None = None) -> RoundConfig:
        return RoundConfig(
            total_clients=self.partition.num_clients,
            fraction=self.fraction,
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            aggregation=AggregationMethod(self.aggregation, self.population_size),
            beta_mode=self.beta_mode,
            seed=self.seed if seed is None else seed,
            eval_mc_samples=self.eval_mc_samples,
            eval_stride=self.eval_stride,
            ece_bins=self.ece_bins,
            kl_weighting=self.kl_weighting,
        )

    def to_dict(self) -> dict:
        d = {
            "dataset": self.dataset.to_dict(),
            "partition": dataclasses.asdict(self.partition),
            "model": {"hidden": list(self.hidden)},
        }
        for f in dataclasses.fields(self):
            if f.name not in ("dataset", "partition", "hidden"):
                d[f.name] = getattr(self, f.name)
        return d

    def fingerprint(self) -> str:
        """Hash of everything that affects results (excludes output path and pool size)."""
        d = self.to_dict()
        d.pop("output")
        d.pop("processes")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_TOP_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"hidden"} | {"model"}
_PARTITION_KEYS = {f.name for f in dataclasses.fields(PartitionSpec)}


def _reject_unknown(d: dict, allowed, prefix: str):
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{prefix}{k}", "unknown key")


def _typed(value, kind, key):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    raise AssertionError(kind)  # pragma: no cover


_SCALARS = {
    "population_size": int,
    "fraction": float,
    "rounds": int,
    "local_epochs": int,
    "batch_size": int,
    "lr": float,
    "momentum": float,
    "weight_decay": float,
    "beta_mode": str,
    "kl_weighting": str,
    "seed": int,
    "eval_mc_samples": int,
    "eval_stride": int,
    "ece_bins": int,
    "dump_ece_bins": bool,
    "output": str,
    "processes": int,
    "aggregation": str,
}

_DATASET_TYPES = {
    "kind": str,
    "classes": int,
    "dims": int,
    "samples_per_class": int,
    "test_samples_per_class": int,
    "spread": float,
    "scale": float,
    "seed": int,
    **{k: str for k in IDX_KEYS},
}


def _dataset(d, base: Path | None) -> DatasetConfig:
    if not isinstance(d, dict):
        raise ConfigError("dataset", "expected a mapping")
    kind = d.get("kind", "synthetic")
    if kind not in DATASET_KINDS:
        raise ConfigError("dataset.kind", f"expected one of {DATASET_KINDS}, got {kind!r}")
    _reject_unknown(d, _IDX_ALLOWED if kind == "idx" else _SYNTHETIC_KEYS, "dataset.")
    vals = {k: _typed(v, _DATASET_TYPES[k], f"dataset.{k}") for k, v in d.items()}
    ds = DatasetConfig(**vals)
    if kind == "idx":
        for k in IDX_KEYS:
            p = getattr(ds, k)
            if p is None:
                raise ConfigError(f"dataset.{k}", "required for idx datasets")
            path = Path(p)
            if base is not None and not path.is_absolute():
                path = base / path
            if not path.exists():
                raise ConfigError(f"dataset.{k}", f"file not found: {path}")
            setattr(ds, k, str(path))
    else:
        if ds.classes < 2:
            raise ConfigError("dataset.classes", "need at least two classes")
        if ds.dims < ds.classes:
            raise ConfigError("dataset.dims", "must be >= classes")
        if ds.samples_per_class < 1 or ds.test_samples_per_class < 1:
            raise ConfigError("dataset.samples_per_class", "must be positive")
        if ds.spread < 0:
            raise ConfigError("dataset.spread", "must be non-negative")
    return ds


def config_from_dict(d: dict, base: Path | None = None) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("<root>", "expected a mapping")
    _reject_unknown(d, _TOP_KEYS, "")
    if "dataset" not in d:
        raise ConfigError("dataset", "required")
    if "aggregation" not in d:
        raise ConfigError("aggregation", "required")
    kwargs = {"dataset": _dataset(d["dataset"], base)}

    part = d.get("partition", {})
    if not isinstance(part, dict):
        raise ConfigError("partition", "expected a mapping")
    _reject_unknown(part, _PARTITION_KEYS, "partition.")
    ptypes = {"kind": str, "num_clients": int, "concentration": float}
    try:
        kwargs["partition"] = PartitionSpec(**{k: _typed(v, ptypes[k], f"partition.{k}") for k, v in part.items()})
    except ConfigError:
        raise
    except BayesFedError as exc:
        raise ConfigError("partition", str(exc)) from exc

    model = d.get("model", {})
    if not isinstance(model, dict):
        raise ConfigError("model", "expected a mapping")
    _reject_unknown(model, {"hidden"}, "model.")
    if "hidden" in model:
        hidden = model["hidden"]
        if not isinstance(hidden, list) or any(isinstance(h, bool) or not isinstance(h, int) or h < 1 for h in hidden):
            raise ConfigError("model.hidden", "expected a list of positive integers")
        kwargs["hidden"] = list(hidden)

    for k, kind in _SCALARS.items():
        if k in d and d[k] is not None:
            kwargs[k] = _typed(d[k], kind, k)

    cfg = ExperimentConfig(**kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    if cfg.aggregation not in METHOD_TAGS:
        raise ConfigError("aggregation", f"expected one of {METHOD_TAGS}, got {cfg.aggregation!r}")
    if cfg.aggregation == "ppa" and cfg.population_size is None:
        raise ConfigError("population_size", "required when aggregation is ppa")
    if cfg.population_size is not None:
        if cfg.aggregation != "ppa":
            raise ConfigError("population_size", "only valid with aggregation ppa")
        k = max(1, int(cfg.partition.num_clients * cfg.fraction + 0.5))
        if cfg.population_size < k:
            raise ConfigError("population_size", f"must be >= number of active clients ({k})")
    if not 0 < cfg.fraction <= 1:
        raise ConfigError("fraction", f"must lie in (0, 1], got {cfg.fraction}")
    for key in ("rounds", "local_epochs", "batch_size", "eval_mc_samples", "eval_stride", "ece_bins", "processes"):
        if getattr(cfg, key) < 1:
            raise ConfigError(key, "must be >= 1")
    if cfg.lr <= 0:
        raise ConfigError("lr", "must be positive")
    if not 0 <= cfg.momentum < 1:
        raise ConfigError("momentum", "must lie in [0, 1)")
    if cfg.weight_decay < 0:
        raise ConfigError("weight_decay", "must be non-negative")
    try:
        cfg.round_config()
    except BayesFedError as exc:
        raise ConfigError("<round>", str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"parse error: {exc}") from exc
    return config_from_dict(raw if raw is not None else {}, base=path.parent)


def dump_config(cfg: ExperimentConfig, path=None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text
