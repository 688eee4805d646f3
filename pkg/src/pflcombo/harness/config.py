"""Experiment configuration: YAML in, validated dataclasses out, and back again."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from ..aggregation import AggregationPolicy, DpConfig
from ..data import PartitionConfig
from ..federation import REGIMES, FederationConfig
from ..personalization import COMBINATION_FLAGS, DEFAULT_MOE_GRID, PersonalizationPlan, plan_for_row

SCENARIOS = ("fl", "dp_fl", "ra_fl")
ALL_ROWS = tuple(range(1, len(COMBINATION_FLAGS) + 1))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # synthetic | csv
    num_classes: int = 10
    input_dim: int = 20
    examples_per_class: int = 200
    class_separation: float = 2.5
    noise_sd: float = 1.0
    csv_path: Optional[str] = None
    label_column: str = "label"
    standardize: bool = True
    feature_columns: Optional[tuple[str, ...]] = None


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 16


@dataclass(frozen=True)
class FlScenario:
    enabled: bool = True


@dataclass(frozen=True)
class DpScenario:
    enabled: bool = False
    clip_bound: float = 1.0
    noise_sd: float = 0.05
    declared_epsilon: Optional[float] = None
    declared_delta: Optional[float] = None


@dataclass(frozen=True)
class RaScenario:
    enabled: bool = True
    method: str = "median"  # median | geometric_median
    weiszfeld_tol: float = 1e-8
    weiszfeld_max_iter: int = 1000


@dataclass(frozen=True)
class FederationSettings:
    rounds: int = 50
    local_epochs: int = 2
    local_lr: float = 0.05
    batch_size: int = 16
    regime: str = "cross_silo"
    sample_size: Optional[int] = None
    eta: float = 1.0
    eval_every: int = 0
    fl: FlScenario = field(default_factory=FlScenario)
    dp_fl: DpScenario = field(default_factory=DpScenario)
    ra_fl: RaScenario = field(default_factory=RaScenario)

    def enabled_scenarios(self) -> list[str]:
        return [s for s in SCENARIOS if getattr(self, s).enabled]

    def policy_for(self, scenario: str) -> AggregationPolicy:
        if scenario == "fl":
            return AggregationPolicy("fedavg", self.eta)
        if scenario == "dp_fl":
            d = self.dp_fl
            return AggregationPolicy(
                "dp", self.eta, dp=DpConfig(d.clip_bound, d.noise_sd, d.declared_epsilon, d.declared_delta)
            )
        if scenario == "ra_fl":
            r = self.ra_fl
            return AggregationPolicy(
                r.method, self.eta, weiszfeld_tol=r.weiszfeld_tol, weiszfeld_max_iter=r.weiszfeld_max_iter
            )
        raise KeyError(scenario)

    def federation_config(self, scenario: str, seed: int, workers: int = 1) -> FederationConfig:
        return FederationConfig(
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            local_lr=self.local_lr,
            batch_size=self.batch_size,
            regime=self.regime,
            sample_size=self.sample_size,
            policy=self.policy_for(scenario),
            seed=seed,
            workers=workers,
            eval_every=self.eval_every,
        )


@dataclass(frozen=True)
class PersonalizationSettings:
    rows: tuple[int, ...] = ALL_ROWS
    ft_epochs: int = 5
    ft_lr: Optional[float] = None  # None: federation.local_lr
    lam: float = 1.0
    kd_alpha: float = 0.5
    kd_temperature: float = 2.0
    kd_scale_on_kl: bool = False
    moe_alpha: Union[float, str] = "tuned"
    moe_grid: tuple[float, ...] = DEFAULT_MOE_GRID
    fisher_samples: int = 200
    baseline_epochs: int = 5
    baseline_lr: Optional[float] = None  # None: federation.local_lr
    eval_clients: Optional[int] = None  # None: every eligible client

    def plan(self, row: int) -> PersonalizationPlan:
        return plan_for_row(
            row,
            ft_epochs=self.ft_epochs,
            ft_lr=self.ft_lr,
            lam=self.lam,
            kd_alpha=self.kd_alpha,
            kd_temperature=self.kd_temperature,
            kd_scale_on_kl=self.kd_scale_on_kl,
            moe_alpha=self.moe_alpha,
            moe_grid=self.moe_grid,
            fisher_samples=self.fisher_samples,
        )


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "results"
    formats: tuple[str, ...] = ("csv", "markdown")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationSettings = field(default_factory=FederationSettings)
    personalization: PersonalizationSettings = field(default_factory=PersonalizationSettings)
    output: OutputConfig = field(default_factory=OutputConfig)
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        validate(self)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


# config keys that differ from the dataclass field names
_ALIASES = {PersonalizationSettings: {"lambda": "lam"}}
_NESTED = {
    ExperimentConfig: {
        "data": DataConfig,
        "partition": PartitionConfig,
        "model": ModelConfig,
        "federation": FederationSettings,
        "personalization": PersonalizationSettings,
        "output": OutputConfig,
    },
    FederationSettings: {"fl": FlScenario, "dp_fl": DpScenario, "ra_fl": RaScenario},
}
_TUPLE_FIELDS = {"split_ratios", "feature_columns", "rows", "moe_grid", "formats"}


def validate(cfg: ExperimentConfig) -> None:
    d, fed, pers = cfg.data, cfg.federation, cfg.personalization
    if d.source not in ("synthetic", "csv"):
        raise ConfigError(f"data.source must be 'synthetic' or 'csv', got {d.source!r}")
    if d.source == "csv" and not d.csv_path:
        raise ConfigError("data.csv_path is required when data.source is 'csv'")
    if fed.regime not in REGIMES:
        raise ConfigError(f"federation.regime must be one of {REGIMES}, got {fed.regime!r}")
    if fed.dp_fl.enabled and fed.regime != "cross_device":
        raise ConfigError(
            "federation.dp_fl is enabled but federation.regime is cross_silo: "
            "DP-FL is only allowed in the cross_device regime"
        )
    if fed.regime == "cross_device" and fed.sample_size is not None and fed.sample_size > cfg.partition.num_clients:
        raise ConfigError(
            f"federation.sample_size ({fed.sample_size}) exceeds partition.num_clients ({cfg.partition.num_clients})"
        )
    if not fed.enabled_scenarios():
        raise ConfigError("no federation scenario is enabled")
    if fed.ra_fl.method not in ("median", "geometric_median"):
        raise ConfigError(f"federation.ra_fl.method must be median or geometric_median, got {fed.ra_fl.method!r}")
    bad_rows = [r for r in pers.rows if r not in ALL_ROWS]
    if bad_rows or len(set(pers.rows)) != len(pers.rows):
        raise ConfigError(f"personalization.rows must be distinct values in 1..13, got {list(pers.rows)}")
    if pers.eval_clients is not None and pers.eval_clients < 1:
        raise ConfigError("personalization.eval_clients must be positive")
    if pers.baseline_epochs < 1:
        raise ConfigError("personalization.baseline_epochs must be positive")
    bad_formats = [f for f in cfg.output.formats if f not in ("csv", "markdown")]
    if bad_formats:
        raise ConfigError(f"unknown output formats {bad_formats}")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    try:
        # surface value errors from the underlying component types
        for s in fed.enabled_scenarios():
            fed.federation_config(s, cfg.seed)
        if pers.rows:
            pers.plan(pers.rows[0])
    except ValueError as e:
        raise ConfigError(str(e)) from e


_FLAG_KEYS = ("ft", "fb", "kd", "mtl", "moe")


def _row_of(entry: Any, path: str) -> int:
    """A combination given by row number or by a flag mapping such as {ft: true, moe: true}."""
    if isinstance(entry, bool):
        raise ConfigError(f"{path}: expected a row number or a flag mapping, got {entry!r}")
    if isinstance(entry, int):
        return entry
    if isinstance(entry, dict):
        unknown = sorted(set(entry) - set(_FLAG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(f'{path}.{k}' for k in unknown)}")
        flags = tuple(bool(entry.get(k, False)) for k in _FLAG_KEYS)
        if flags not in COMBINATION_FLAGS:
            raise ConfigError(f"{path}: flags {dict(entry)} match no combination row")
        return COMBINATION_FLAGS.index(flags) + 1
    raise ConfigError(f"{path}: expected a row number or a flag mapping, got {entry!r}")


def _unknown_keys(cls, raw: Any, path: str) -> list[str]:
    if not isinstance(raw, dict):
        return []
    aliases = _ALIASES.get(cls, {})
    nested = _NESTED.get(cls, {})
    names = {f.name for f in dataclasses.fields(cls)} - set(aliases.values())
    out = []
    for key, value in raw.items():
        where = f"{path}.{key}" if path else str(key)
        name = aliases.get(key, key)
        if name not in names and key not in aliases:
            out.append(where)
        elif name in nested:
            out.extend(_unknown_keys(nested[name], value, where))
    return out


def _build(cls, raw: Any, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(raw).__name__}")
    aliases = _ALIASES.get(cls, {})
    nested = _NESTED.get(cls, {})
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs, unknown = {}, []
    for key, value in raw.items():
        name = aliases.get(key, key)
        if name not in names or (name in aliases.values() and key not in aliases):
            unknown.append(f"{path}.{key}" if path else str(key))
            continue
        if name in nested:
            value = _build(nested[name], value, f"{path}.{key}" if path else key)
        elif name == "rows" and value is not None:
            value = tuple(_row_of(v, f"{path}.rows[{i}]") for i, v in enumerate(value))
        elif name in _TUPLE_FIELDS and value is not None:
            value = tuple(value)
        kwargs[name] = value
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def config_from_dict(raw: dict) -> ExperimentConfig:
    unknown = _unknown_keys(ExperimentConfig, raw, "")
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return _build(ExperimentConfig, raw, "")


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        raise ConfigError(f"{where}: malformed config: {e.problem}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: malformed config: {e}") from None
    return config_from_dict(raw or {})


def config_to_dict(cfg) -> dict:
    out = {}
    inverse = {v: k for k, v in _ALIASES.get(type(cfg), {}).items()}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            value = config_to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[inverse.get(f.name, f.name)] = value
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def demo_config_path() -> Path:
    return Path(__file__).resolve().parent.parent / "configs" / "demo.yaml"
