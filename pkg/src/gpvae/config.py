"""JSON run configuration: data source, model/training settings and evaluation settings."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import Dataset, gen_synthetic, load_idx, split_dataset
from .errors import ConfigError
from .training import TrainConfig, validate_fields

DATA_KINDS = ("mnist", "gaussian-mixture", "pinwheel")
BUNDLED = Path(__file__).resolve().parents[2]


@dataclass
class DataConfig:
    kind: str = "mnist"
    images: str = "data/mnist5k-images-idx3-ubyte.gz"
    labels: str = "data/mnist5k-labels-idx1-ubyte.gz"
    n_train: int = 3500
    n_val: int = 500
    n_test: int = 1000
    n: int = 2000

    def __post_init__(self):
        validate_fields(self)
        if self.kind not in DATA_KINDS:
            raise ConfigError(f"data.kind: expected one of {DATA_KINDS}, got {self.kind!r}")


@dataclass
class EvalConfig:
    K: int = 100
    batch_size: int = 128
    svi_steps: int = 500
    svi_step_size: float = 1e-2
    svi_decay: float = 100.0
    gap_eval_samples: int = 256
    sa_step_size: float = 1e-3
    sa_steps: list = field(default_factory=lambda: [1, 2, 4, 8])
    bench_repeats: int = 5
    n_instances: int = 100
    grid_bound: float = 6.0
    grid_resolution: int = 200
    max_test: int = 0

    def __post_init__(self):
        validate_fields(self)
        if self.K < 1 or self.batch_size < 1:
            raise ConfigError("eval.K and eval.batch_size must be positive")
        if not all(isinstance(k, int) and k >= 0 for k in self.sa_steps):
            raise ConfigError(f"eval.sa_steps: expected a list of nonnegative ints, got {self.sa_steps!r}")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint: str = ""
    data: DataConfig = field(default_factory=DataConfig)
    model: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "checkpoint.bin"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**raw)
    except ConfigError as e:
        raise ConfigError(f"{name}.{e}") from None


def parse_config(raw: dict) -> RunConfig:
    """Build a RunConfig; the top-level ``seed`` also seeds the model unless ``model.seed`` is given."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - {"seed", "out_dir", "checkpoint", "data", "model", "eval"}
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {sorted(unknown)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed: expected int, got {type(seed).__name__} ({seed!r})")
    model_raw = dict(raw.get("model") or {})
    model_raw.setdefault("seed", seed)
    cfg = RunConfig(seed=seed,
                    out_dir=raw.get("out_dir", "runs/default"),
                    checkpoint=raw.get("checkpoint", ""),
                    data=_section(DataConfig, raw.get("data"), "data"),
                    model=_section(TrainConfig, model_raw, "model"),
                    eval=_section(EvalConfig, raw.get("eval"), "eval"))
    for name in ("out_dir", "checkpoint"):
        if not isinstance(getattr(cfg, name), str):
            raise ConfigError(f"{name}: expected str, got {type(getattr(cfg, name)).__name__}")
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_config(raw)


def build_dataset(cfg: RunConfig, base_dir: Path | None = None) -> Dataset:
    dc = cfg.data
    if dc.kind == "mnist":
        def resolve(p):
            p = Path(p)
            if p.is_absolute():
                return p
            if base_dir is not None:
                return base_dir / p
            # relative paths are tried from the working directory, then from the source checkout
            return p if p.exists() or not (BUNDLED / p).exists() else BUNDLED / p
        labels = resolve(dc.labels) if dc.labels else None
        full = load_idx(resolve(dc.images), labels)
        return split_dataset(full, dc.n_train, dc.n_val, dc.n_test, cfg.seed)
    return gen_synthetic(dc.kind, dc.n, cfg.seed)
