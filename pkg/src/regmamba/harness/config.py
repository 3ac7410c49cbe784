"""Structured run configuration loaded from YAML/JSON.

Top-level sections: ``backbone``, ``mefl``, ``loss``, ``train``, ``data``, ``eval``,
``robustness``. Every key is optional; missing keys take the dataclass defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..backbone import BackboneConfig
from ..data import SynthConfig
from ..matcher import LossConfig
from ..mefl import ModelConfig, PoolConfig


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0
    device: str = "cpu"
    eval_every: int = 0
    similarity_method: str = "fft"
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EvalConfig:
    thresholds: list[float] = field(default_factory=lambda: [1, 2, 3, 5])


@dataclass
class RobustnessConfig:
    variances: list[float] = field(default_factory=lambda: [2, 5, 10, 15, 20, 25, 30])
    seed: int = 1234


@dataclass
class DataConfig:
    manifest: str | None = None
    n_train: int = 500
    n_test: int = 100
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    robustness: RobustnessConfig = field(default_factory=RobustnessConfig)

    def to_dict(self) -> dict:
        m = self.model
        return {
            "backbone": dataclasses.asdict(m.backbone),
            "mefl": {"use_mefl": m.use_mefl, "n_experts": m.n_experts, "fusion": m.fusion,
                     **dataclasses.asdict(m.pool)},
            "loss": dataclasses.asdict(self.train.loss),
            "train": {k: v for k, v in dataclasses.asdict(self.train).items() if k != "loss"},
            "data": {"manifest": self.data.manifest, "n_train": self.data.n_train, "n_test": self.data.n_test,
                     "synth": dataclasses.asdict(self.data.synth)},
            "eval": dataclasses.asdict(self.eval),
            "robustness": dataclasses.asdict(self.robustness),
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {"backbone", "mefl", "loss", "train", "data", "eval", "robustness"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        mefl = dict(d.get("mefl") or {})
        pool_keys = {f.name for f in dataclasses.fields(PoolConfig)}
        pool = PoolConfig(**{k: mefl.pop(k) for k in list(mefl) if k in pool_keys})
        model = ModelConfig(backbone=_build(BackboneConfig, d.get("backbone")), pool=pool, **mefl)
        train = dict(d.get("train") or {})
        train_cfg = _build(TrainConfig, train, loss=_build(LossConfig, d.get("loss")))
        data = dict(d.get("data") or {})
        data_cfg = _build(DataConfig, data, synth=_build(SynthConfig, data.pop("synth", None)))
        return cls(model, train_cfg, data_cfg, _build(EvalConfig, d.get("eval")),
                    _build(RobustnessConfig, d.get("robustness")))


def _build(cls, values: dict | None, **extra):
    values = {k: v for k, v in (values or {}).items() if k not in extra}
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**values, **extra)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return RunConfig.from_dict(yaml.safe_load(fh))


def desk_config(**train_overrides) -> RunConfig:
    """Desk-scale preset: tiny backbone with a sigma-1 input pre-filter, 2 experts, 64px references with 48px templates."""
    cfg = RunConfig()
    cfg.model = ModelConfig(backbone=BackboneConfig.tiny(input_sigma=1.0), n_experts=2)
    for k, v in train_overrides.items():
        setattr(cfg.train, k, v)
    return cfg
