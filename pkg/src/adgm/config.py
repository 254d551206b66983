"""Strict JSON experiment configuration."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .models import SEMI_SUPERVISED, Kind, ModelVariant
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


DATASET_KINDS = ("halfmoons", "mnist", "potential")


@dataclass
class DatasetSpec:
    kind: str = "halfmoons"
    n_train: int = 10_000
    n_test: int = 10_000
    n_labels: int = 6
    noise: float = 0.1
    path: str | None = None  # MNIST directory
    pixel_std_threshold: float = 0.1
    n_unlabeled: int | None = None  # subsample of the MNIST training pool
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind == "mnist":
            if not self.path:
                raise ConfigError("dataset.path is required for mnist")
            if not Path(self.path).exists():
                raise ConfigError(f"dataset.path does not exist: {self.path}")
        if self.noise < 0:
            raise ConfigError("dataset.noise must be >= 0")


@dataclass
class EvalSpec:
    iw_k: int = 5000
    n_mc: int = 10
    n_samples: int = 10

    def validate(self) -> None:
        if self.iw_k < 1 or self.n_mc < 1:
            raise ConfigError("eval.iw_k and eval.n_mc must be >= 1")


@dataclass
class ExperimentConfig:
    model: ModelVariant = field(default_factory=lambda: ModelVariant("ADGM", y_dim=2, a_dim=10, z_dim=10,
                                                                     obs="gaussian"))
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    output: str = "runs/default"

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "dataset": dataclasses.asdict(self.dataset),
            "train": self.train.to_dict(),
            "eval": dataclasses.asdict(self.eval),
            "output": self.output,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def model_defaults(dataset_kind: str, model_kind: str) -> dict:
    """Variant defaults matched to the dataset; explicit keys override them.

    ``x_dim`` 0 for MNIST means "take it from the pruned data".
    """
    try:
        semi = Kind(model_kind) in SEMI_SUPERVISED
    except ValueError as e:
        raise ConfigError(f"model.kind: {e}") from e
    if dataset_kind == "mnist":
        d = {"x_dim": 0, "a_dim": 100, "z_dim": 100, "hidden_dims": [500, 500], "obs": "bernoulli"}
        if semi:
            d["y_dim"] = 10
    elif dataset_kind == "potential":
        d = {"x_dim": 2, "a_dim": 2, "z_dim": 2, "hidden_dims": [20, 20, 20]}
    else:
        d = {"x_dim": 2, "a_dim": 10, "z_dim": 10, "hidden_dims": [100, 100], "obs": "gaussian"}
        if semi:
            d["y_dim"] = 2
    d["kind"] = model_kind
    return d


def _build(cls, section: str, raw, defaults: dict | None = None):
    if not isinstance(raw, dict):
        raise ConfigError(f"{section} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}")
    kwargs = dict(defaults or {})
    kwargs.update(raw)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from e


def _check_pairing(dataset_kind: str, model_kind) -> None:
    if (dataset_kind == "potential") != (model_kind == "PotentialFit"):
        raise ConfigError("dataset.kind 'potential' goes with model.kind 'PotentialFit' only")


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {"model", "dataset", "train", "eval", "output"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key {key}")
    base = ExperimentConfig()
    dataset = _build(DatasetSpec, "dataset", raw.get("dataset", {}))
    raw_model = raw.get("model", {})
    if isinstance(raw_model, dict):
        _check_pairing(dataset.kind, raw_model.get("kind", "ADGM"))
    model = _build(ModelVariant, "model", raw_model, model_defaults(dataset.kind, raw_model.get("kind", "ADGM"))
                   if isinstance(raw_model, dict) else None)
    # MNIST is evaluated every 10 epochs, toy data every epoch
    train = _build(TrainConfig, "train", raw.get("train", {}), {"eval_every": 10} if dataset.kind == "mnist" else None)
    ev = _build(EvalSpec, "eval", raw.get("eval", {}))
    output = raw.get("output", base.output)
    if not isinstance(output, str):
        raise ConfigError("output must be a string")
    cfg = ExperimentConfig(model, dataset, train, ev, output)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    cfg.dataset.validate()
    cfg.eval.validate()
    kind, m = cfg.dataset.kind, cfg.model
    if m.x_dim < 0 or (m.x_dim == 0 and kind != "mnist"):
        raise ConfigError("model.x_dim must be positive")
    if kind == "halfmoons":
        if m.x_dim != 2:
            raise ConfigError("halfmoons data is 2-dimensional; set model.x_dim to 2")
        if m.has_classifier and m.y_dim != 2:
            raise ConfigError("halfmoons has 2 classes; set model.y_dim to 2")
    if kind == "mnist" and m.has_classifier and m.y_dim != 10:
        raise ConfigError("mnist has 10 classes; set model.y_dim to 10")
    _check_pairing(kind, m.kind.value)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from e
    return parse_config(raw)
