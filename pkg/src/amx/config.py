"""JSON run configuration shared by every CLI subcommand."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .actmax import MaxConfig
from .data import DatasetSplit, scan_corpus, synth_dataset
from .errors import AmxError, ConfigError
from .train import TrainConfig

SEED_NAMES = ("classifier", "separate", "autoencoder", "maximization")


@dataclass
class SyntheticSpec:
    num_classes: int = 5
    per_class: int = 200
    seed: int = 0
    noise_sigma: float = 0.05
    band_width: float = 2.5


@dataclass
class DatasetConfig:
    root: str | None = None
    synthetic: SyntheticSpec | None = None
    class_filter: list[str] | None = None
    max_per_class: int | None = None
    val_pct: int = 10
    test_pct: int = 10

    def __post_init__(self):
        if (self.root is None) == (self.synthetic is None):
            raise ConfigError("dataset needs exactly one of 'root' or 'synthetic'")

    def load(self) -> DatasetSplit:
        if self.synthetic is not None:
            s = self.synthetic
            return synth_dataset(s.num_classes, s.per_class, s.seed, s.noise_sigma, s.band_width,
                                 self.val_pct, self.test_pct)
        return scan_corpus(self.root, self.class_filter, self.max_per_class, self.val_pct, self.test_pct)


@dataclass
class Seeds:
    classifier: int
    separate: int
    autoencoder: int
    maximization: int


@dataclass
class EvalConfig:
    per_class: int = 1000
    modes: list[str] = field(default_factory=lambda: ["direct", "latent"])
    embed_examples: int = 300
    perplexity: float = 30.0
    tsne_iters: int = 1000
    samples_per_class: int = 1  # maximized grids exported as CSV/JSON per class

    def __post_init__(self):
        bad = [m for m in self.modes if m not in ("direct", "latent")]
        if bad or not self.modes:
            raise ConfigError(f"eval.modes must be a non-empty subset of ['direct', 'latent'], got {self.modes}")
        if self.per_class < 1:
            raise ConfigError(f"eval.per_class must be >= 1, got {self.per_class}")


@dataclass
class RunConfig:
    dataset: DatasetConfig
    seeds: Seeds
    output_dir: str = "out"
    train: TrainConfig = field(default_factory=TrainConfig)
    autoencoder_train: TrainConfig = field(default_factory=TrainConfig)
    latent_dim: int = 128
    maximize: MaxConfig = field(default_factory=MaxConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_NESTED = {
    "RunConfig": {"dataset": DatasetConfig, "seeds": Seeds, "train": TrainConfig, "autoencoder_train": TrainConfig,
                  "maximize": MaxConfig, "eval": EvalConfig},
    "DatasetConfig": {"synthetic": SyntheticSpec},
}


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {unknown}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(cls.__name__, {}).get(key)
        kwargs[key] = _build(sub, value, f"{where}.{key}") if sub is not None and value is not None else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    seeds = data.get("seeds")
    if not isinstance(seeds, dict) or any(k not in seeds for k in SEED_NAMES):
        raise ConfigError(f"config.seeds must define all of {list(SEED_NAMES)}")
    if any(not isinstance(seeds[k], int) or isinstance(seeds[k], bool) for k in SEED_NAMES):
        raise ConfigError("config.seeds values must be integers")
    if "dataset" not in data:
        raise ConfigError("config.dataset is required")
    try:
        return _build(RunConfig, data, "config")
    except ConfigError:
        raise
    except AmxError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)
