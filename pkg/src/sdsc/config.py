"""JSON run configuration with strict keys and a fully-defaulted echo."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .compressor import MODES, CompressionConfig
from .data import Dataset, load_idx_images, read_names, synthetic_text, synthetic_vision, windows_from_names
from .models import CnnSpec, DecoderSpec, QuantModel, build_cnn, build_decoder
from .preserve import DEFAULT_QUOTAS
from .tensor import Rng

TASKS = ("vision", "text")
DATA_SOURCES = ("synthetic", "idx", "names")
TEST_SEED_OFFSET = 1000


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"
    n_train: int = 2000  # synthetic: images, or names for the text task
    n_test: int = 500
    seed: int | None = None  # None: follow the run seed
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    names_path: str | None = None
    test_fraction: float = 0.2


@dataclass
class PreservationConfig:
    rho: float = 0.10
    quotas: list[float] = field(default_factory=lambda: list(DEFAULT_QUOTAS))
    path: str | None = None  # reuse a saved set instead of building one


@dataclass
class RunConfig:
    mode: str = "safe"
    task: str = "vision"
    seed: int = 0
    model: dict = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    compression: CompressionConfig = field(default_factory=CompressionConfig)
    preservation: PreservationConfig = field(default_factory=PreservationConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.data.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}")
        allowed = ("synthetic", "idx") if self.task == "vision" else ("synthetic", "names")
        if self.data.source not in allowed:
            raise ConfigError(f"data.source {self.data.source!r} does not fit task {self.task!r}")
        # materialize the model spec so the echo shows every default
        self.model = asdict(_strict(self.spec_class, self.model, "model"))
        try:
            self.model_spec().validate()
            self.compression.seed = self.seed
            self.compression.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 < self.preservation.rho <= 1:
            raise ConfigError("preservation.rho must be in (0, 1]")
        if len(self.preservation.quotas) != 3:
            raise ConfigError("preservation.quotas needs three entries")

    @property
    def spec_class(self):
        return CnnSpec if self.task == "vision" else DecoderSpec

    def model_spec(self):
        return self.spec_class(**self.model)

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["compression"].pop("seed")  # the run seed is the single source
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, **changes) -> "RunConfig":
        d = self.to_dict()
        for key, value in changes.items():
            if value is None:
                continue
            section, _, leaf = key.rpartition(".")
            target = d[section] if section else d
            target[leaf] = value
        return config_from_dict(d)


def _strict(cls, raw, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) at top level: {', '.join(unknown)}")
    comp = dict(raw.get("compression") or {})
    if "seed" in comp:
        raise ConfigError("compression.seed is not configurable; set the top-level seed")
    top = {k: v for k, v in raw.items() if k in ("mode", "task", "seed", "model")}
    try:
        return RunConfig(
            **top,
            data=_strict(DataConfig, raw.get("data"), "data"),
            compression=_strict(CompressionConfig, comp, "compression"),
            preservation=_strict(PreservationConfig, raw.get("preservation"), "preservation"),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


def _require(path, what: str) -> str:
    if not path:
        raise ConfigError(f"data.{what} is required for this data source")
    if not Path(path).exists():
        raise ConfigError(f"data.{what} not found: {path}")
    return path


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    seed = cfg.data_seed
    if d.source == "idx":
        train = load_idx_images(_require(d.train_images, "train_images"), _require(d.train_labels, "train_labels"))
        test = load_idx_images(_require(d.test_images, "test_images"), _require(d.test_labels, "test_labels"), "test")
        return train, test
    if cfg.task == "vision":
        return (synthetic_vision(d.n_train, seed, "train"),
                synthetic_vision(d.n_test, seed + TEST_SEED_OFFSET, "test"))
    context = cfg.model_spec().context
    if d.source == "names":
        names = read_names(_require(d.names_path, "names_path"))
        order = Rng(seed).permutation(len(names))
        n_test = max(1, round(d.test_fraction * len(names)))
        if n_test >= len(names):
            raise ConfigError("names corpus too small for a train/test split")
        test_ids, train_ids = order[:n_test], order[n_test:]
        return (windows_from_names([names[i] for i in sorted(train_ids)], context, "train"),
                windows_from_names([names[i] for i in sorted(test_ids)], context, "test"))
    return (synthetic_text(d.n_train, seed, context, "train"),
            synthetic_text(d.n_test, seed + TEST_SEED_OFFSET, context, "test"))


def build_model(cfg: RunConfig) -> QuantModel:
    rng = Rng(cfg.seed)
    b0 = cfg.compression.b0
    if cfg.task == "vision":
        return build_cnn(cfg.model_spec(), rng, b0)
    return build_decoder(cfg.model_spec(), rng, b0)
