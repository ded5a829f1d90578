"""Run configuration: dataclasses plus strict JSON loading."""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, HLAError
from .numerics import LrSchedule
from .quantizer import DELTA_MODES


@dataclass
class SparsitySchedule:
    t_start: float = 0.3
    t_end: float = 0.7
    t_step: float = 0.04
    epochs_per_stage: int = 10

    def __post_init__(self):
        if not (0.0 < self.t_start <= self.t_end < 1.0) or not self.t_step > 0:
            raise HLAError(f"invalid sparsity schedule {self}")
        if self.epochs_per_stage < 0:
            raise HLAError("epochs_per_stage must be >= 0")

    def stages(self):
        """Targets t_start, t_start + t_step, ... while t < t_end.

        The 1e-9 guard keeps float drift in the running sum from adding a
        stage that sits on t_end.
        """
        out = []
        t = self.t_start
        while t < self.t_end - 1e-9:
            out.append(t)
            t += self.t_step
        return out


@dataclass
class DataConfig:
    kind: str = "blobs"  # "blobs" or "idx"
    num_classes: int = 3
    feature_dim: int = 16
    samples_per_class: int = 500
    separation: float = 4.0
    sigma: float = 1.0
    seed: int = 0
    test_fraction: float = 0.2
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class TrainConfig:
    seed: int = 0
    hidden: list = field(default_factory=lambda: [32])
    batch_size: int = 256
    lr: LrSchedule = field(default_factory=LrSchedule)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: SparsitySchedule = field(default_factory=SparsitySchedule)
    pretrain_epochs: int = 0
    quantize_epochs: int = 50
    delta_init_t: float = 0.65
    delta_update_mode: str = "sgd_literal"
    delta_lr_scale: float = 0.1
    threshold_scope: str = "per_layer"
    eligibility: list = None
    rescale: bool = True
    threads: int = 1
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if not 0.0 < self.delta_init_t < 1.0:
            raise HLAError("delta_init_t must lie in (0, 1)")
        if self.delta_update_mode not in DELTA_MODES:
            raise HLAError(f"delta_update_mode must be one of {DELTA_MODES}")
        if self.threshold_scope not in ("per_layer", "global"):
            raise HLAError("threshold_scope must be 'per_layer' or 'global'")
        if self.batch_size < 1:
            raise HLAError("batch_size must be >= 1")
        if self.threads != 1:
            raise HLAError("only single-threaded execution (threads=1) is supported")

    def to_dict(self):
        return dataclasses.asdict(self)


_NESTED = {"lr": LrSchedule, "schedule": SparsitySchedule, "data": DataConfig}


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown field {unknown[0]!r}")
    kwargs = {}
    for key, value in raw.items():
        sub = _NESTED.get(key) if cls is TrainConfig else None
        kwargs[key] = _build(sub, value, f"{where}.{key}") if sub else value
    try:
        return cls(**kwargs)
    except (HLAError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw):
    return _build(TrainConfig, raw, "config")


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(raw)
