"""Run configuration: one JSON document with a versioned schema key.

Unknown keys anywhere in the document are errors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

from lpt.errors import ConfigError
from lpt.hypergrad import UnrollConfig
from lpt.optim import OptimizerSettings
from lpt.search_space import VECTOR_OPS, CellSpec

SCHEMA = "lpt-config/1"
MODES = ("full", "ablation1", "ablation2", "darts_baseline")


@dataclass
class SplitConfig:
    fractions: tuple = (0.4, 0.2, 0.2, 0.2)
    alias_bank_val: bool = True
    seed: int = 0


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "file"
    n: int = 400
    noise: float = 0.1
    shape: str = "moons"
    corrupt_frac: float = 0.0
    corrupt_scope: str = "all"  # "all" or "bank"
    test_n: int = 1000
    seed: int = 0
    path: str | None = None
    test_path: str | None = None
    image_shape: tuple | None = None
    split: SplitConfig = field(default_factory=SplitConfig)


@dataclass
class CellConfig:
    num_nodes: int = 7
    num_cells: int = 1
    ops: tuple = VECTOR_OPS
    width: int = 16
    k_in: int = 2

    def spec(self, **override) -> CellSpec:
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update({k: v for k, v in override.items() if v is not None})
        return CellSpec(**kw)


@dataclass
class TesterConfig:
    hidden: int = 16
    latent: int = 8
    label_aware: bool = True


@dataclass
class OptimConfig:
    weights: OptimizerSettings = field(
        default_factory=lambda: OptimizerSettings("sgd", 0.025, 0.9, 3e-4, min_lr=0.001)
    )
    arch: OptimizerSettings = field(
        default_factory=lambda: OptimizerSettings("adam", 3e-4, weight_decay=1e-3, betas=(0.5, 0.999), cosine=False)
    )
    encoder_executor: OptimizerSettings = field(
        default_factory=lambda: OptimizerSettings("sgd", 0.025, 0.9, 3e-4, min_lr=0.001)
    )
    creator: OptimizerSettings = field(
        default_factory=lambda: OptimizerSettings("adam", 3e-4, weight_decay=1e-3, cosine=False)
    )


@dataclass
class EvalConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 3e-4
    num_cells: int | None = None
    width: int | None = None


@dataclass
class LptConfig:
    seed: int = 0
    precision: str = "float32"
    mode: str = "full"
    lam: float = 1.0
    gamma: float = 1.0
    epochs: int = 50
    warmup_epochs: int = 0
    batch_size: int = 64
    bank_batch_size: int | None = None
    selection_override: float | None = None
    freeze_creator: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    cell: CellConfig = field(default_factory=CellConfig)
    tester: TesterConfig = field(default_factory=TesterConfig)
    unroll: UnrollConfig = field(default_factory=UnrollConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "LptConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {self.mode!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision: expected float32 or float64, got {self.precision!r}")
        if self.lam < 0:
            raise ConfigError("lambda: must be >= 0")
        if self.gamma < 0:
            raise ConfigError("gamma: must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs: must lie in [0, epochs)")
        if self.batch_size < 1 or (self.bank_batch_size is not None and self.bank_batch_size < 1):
            raise ConfigError("batch_size: must be >= 1")
        if self.selection_override is not None and not 0 < self.selection_override <= 1:
            raise ConfigError("selection_override: must lie in (0, 1]")
        if self.data.source not in ("synthetic", "file"):
            raise ConfigError(f"data.source: unknown source {self.data.source!r}")
        if self.data.source == "file" and not self.data.path:
            raise ConfigError("data.path: required when data.source is 'file'")
        if self.data.corrupt_scope not in ("all", "bank"):
            raise ConfigError(f"data.corrupt_scope: unknown scope {self.data.corrupt_scope!r}")
        for name in ("weights", "arch", "encoder_executor", "creator"):
            if getattr(self.optim, name).kind not in ("sgd", "adam"):
                raise ConfigError(f"optim.{name}.kind: expected sgd or adam")
        try:
            self.cell.spec()
            UnrollConfig(**asdict(self.unroll))
        except ValueError as exc:
            raise ConfigError(f"cell/unroll: {exc}") from None
        return self

    def with_overrides(self, **kw) -> "LptConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = _to_plain(self)
        d["lambda"] = d.pop("lam")
        return {"schema": SCHEMA, **d}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, raw: dict) -> "LptConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        raw = dict(raw)
        schema = raw.pop("schema", None)
        if schema != SCHEMA:
            raise ConfigError(f"schema: expected {SCHEMA!r}, got {schema!r}")
        if "lambda" in raw:
            raw["lam"] = raw.pop("lambda")
        config = _build(cls, raw, "")
        try:
            return config.validate()
        except TypeError as exc:
            raise ConfigError(f"config: wrongly typed value ({exc})") from None


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return list(obj)
    return obj


_NESTED = {
    "data": DataConfig,
    "split": SplitConfig,
    "cell": CellConfig,
    "tester": TesterConfig,
    "unroll": UnrollConfig,
    "optim": OptimConfig,
    "eval": EvalConfig,
    "weights": OptimizerSettings,
    "arch": OptimizerSettings,
    "encoder_executor": OptimizerSettings,
    "creator": OptimizerSettings,
}
_TUPLES = {"fractions", "ops", "betas", "image_shape"}


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path.rstrip('.') or 'config'}: expected an object")
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        shown = "lambda" if key == "lam" else key
        if key not in known:
            raise ConfigError(f"{path}{shown}: unknown key")
        if key in _NESTED and is_dataclass(_NESTED[key]) and isinstance(value, dict):
            value = _build(_NESTED[key], value, f"{path}{key}.")
        elif key in _NESTED:
            raise ConfigError(f"{path}{key}: expected an object")
        elif key in _TUPLES and value is not None:
            if not isinstance(value, list):
                raise ConfigError(f"{path}{key}: expected a list")
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path.rstrip('.') or 'config'}: {exc}") from None


def load_config(path) -> LptConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return LptConfig.from_dict(raw)
