"""Experiment configuration: JSON schema, strict loading, validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .aggregation import STRATEGIES, BetaSchedule, TrainConfig
from .distill import DistillConfig, SynthesisConfig
from .errors import ConfigError
from .sim import GROUPS


def _strict(cls, section: str, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{section}' must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"section '{section}': {exc}") from exc


@dataclass
class DatasetConfig:
    classes: int = 10
    dim: int = 32
    samples: int = 2500
    spread: float = 1.6
    radius: float = 4.0
    test_fraction: float = 0.15


@dataclass
class PartitionConfig:
    alpha: float | None = 0.5       # None means IID
    samples_per_client: int | None = None


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [64])
    activation: str = "relu"
    track_hidden: bool = True


@dataclass
class PopulationConfig:
    clients: int = 40
    active_fraction: float = 0.5
    group_mix: dict = field(default_factory=lambda: {"slow": 1 / 3, "medium": 1 / 3, "fast": 1 / 3})
    group_delays: dict | None = None
    sigma: float = 0.5
    client_jitter: float = 0.25
    mean_cycle: float = 50.0


@dataclass
class StrategyConfig:
    name: str = "async"
    buffer_size: int | None = None
    beta_family: str | None = None
    beta_tau_star: float | None = None
    beta_value: float | None = None


@dataclass
class DfkdConfig:
    synth_steps: int = 2
    synth_lr: float = 0.05
    synth_batch: int = 64
    latent_dim: int = 16
    gen_hidden: int = 64
    output_scale: float = 8.0
    w_target: float = 1.0
    w_feature: float = 0.003
    w_adv: float = 0.1
    meta_lambda: float = 0.5
    buffer_size: int = 8
    store_capacity: int = 512
    distill_steps: int = 10
    distill_lr: float = 0.01
    distill_batch: int = 32
    temperature: float = 1.0
    public_fraction: float = 1 / 6   # used by revive_dd only


@dataclass
class EvaluationConfig:
    interval: float = 10.0
    horizon: float = 300.0


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    partition: PartitionConfig
    model: ModelConfig
    population: PopulationConfig
    training: TrainConfig
    strategy: StrategyConfig
    evaluation: EvaluationConfig
    dfkd: DfkdConfig | None = None
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "runs"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        sections = {
            "dataset": DatasetConfig, "partition": PartitionConfig,
            "model": ModelConfig, "population": PopulationConfig,
            "training": TrainConfig, "strategy": StrategyConfig,
            "evaluation": EvaluationConfig, "dfkd": DfkdConfig,
        }
        unknown = set(raw) - set(sections) - {"seeds", "out_dir"}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in sections.items():
            if name in raw:
                kwargs[name] = _strict(section_cls, name, raw[name])
            elif name == "dfkd":
                kwargs[name] = None
            else:
                kwargs[name] = section_cls() if name != "training" else _strict(
                    TrainConfig, name, {"client_lr": 0.005, "server_lr": 0.3})
        cfg = cls(seeds=list(raw.get("seeds", [0, 1, 2])),
                  out_dir=str(raw.get("out_dir", "runs")), **kwargs)
        cfg.validate()
        return cfg

    def validate(self):
        self.training.validate()
        name = self.strategy.name
        if name not in STRATEGIES:
            raise ConfigError(f"unknown strategy {name!r}")
        if name == "fedbuff":
            if self.strategy.buffer_size is None or self.strategy.buffer_size < 1:
                raise ConfigError("fedbuff needs a positive buffer_size")
        elif self.strategy.buffer_size is not None:
            raise ConfigError(f"buffer_size is only valid for fedbuff, not {name!r}")

        uses_beta = name in ("afldw", "revive", "revive_dd")
        beta_given = any(v is not None for v in (self.strategy.beta_family,
                                                 self.strategy.beta_tau_star,
                                                 self.strategy.beta_value))
        if uses_beta:
            self.beta_schedule()  # validates
        elif beta_given:
            raise ConfigError(f"beta schedule settings are not valid for {name!r}")

        uses_dfkd = name in ("revive", "revive_dd")
        if uses_dfkd and self.dfkd is None:
            raise ConfigError(f"strategy {name!r} needs a dfkd section")
        if not uses_dfkd and self.dfkd is not None:
            raise ConfigError(f"dfkd section is only valid for revive strategies, not {name!r}")

        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.evaluation.interval <= 0 or self.evaluation.horizon < 0:
            raise ConfigError("evaluation interval must be positive and horizon non-negative")
        if self.dataset.classes < 2 or self.dataset.dim < 2:
            raise ConfigError("dataset needs at least 2 classes and 2 dimensions")
        if not 0.0 < self.population.active_fraction <= 1.0:
            raise ConfigError("active_fraction must be in (0, 1]")
        if self.partition.alpha is not None and self.partition.alpha <= 0:
            raise ConfigError("alpha must be positive (or null for IID)")
        bad_groups = set(self.population.group_mix) - set(GROUPS)
        if bad_groups:
            raise ConfigError(f"unknown groups in mix: {sorted(bad_groups)}")

    def beta_schedule(self) -> BetaSchedule:
        return BetaSchedule(family=self.strategy.beta_family or "one_cosine",
                            tau_star=self.strategy.beta_tau_star,
                            value=self.strategy.beta_value)

    def synthesis_config(self) -> SynthesisConfig:
        d = self.dfkd
        return SynthesisConfig(steps=d.synth_steps, lr=d.synth_lr, batch=d.synth_batch,
                               latent_dim=d.latent_dim, hidden=d.gen_hidden,
                               output_scale=d.output_scale, w_target=d.w_target,
                               w_feature=d.w_feature, w_adv=d.w_adv,
                               meta_lambda=d.meta_lambda)

    def distill_config(self) -> DistillConfig:
        d = self.dfkd
        return DistillConfig(steps=d.distill_steps, lr=d.distill_lr,
                             batch=d.distill_batch, temperature=d.temperature)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)
