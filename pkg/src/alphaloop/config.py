# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

"""
Run configuration: a tree of frozen dataclasses read from an INI file.

Every default lives on the dataclasses below; :func:`example_config`
renders them so that a generated file states each one explicitly.
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
import os
from pathlib import Path
from typing import Any, Mapping

from .panel import DateRange, MarketId

__all__ = [
    "AcceptanceConfig",
    "Ablation",
    "ConfigError",
    "MinerConfig",
    "PolicyBackend",
    "PolicyConfig",
    "RegimeConfig",
    "RunConfig",
    "ScreenerConfig",
    "Splits",
    "TraderConfig",
    "WORKSPACE_ENV",
    "dump_config",
    "example_config",
    "load_config",
]

WORKSPACE_ENV = "ALPHALOOP_WORKSPACE"


class ConfigError(ValueError):
    """
    The configuration file is unreadable, names an unknown section or key,
    holds a value of the wrong type, or breaks a cross-field rule.
    """


class Ablation(enum.Enum):
    NONE = "none"
    NO_MINER = "no-miner"
    NO_SCREENER = "no-screener"
    NO_TRADER = "no-trader"

    @classmethod
    def parse(cls, value: str | Ablation) -> Ablation:
        if isinstance(value, Ablation):
            return value
        key = value.strip().lower().replace("_", "-")
        for member in cls:
            if key == member.value:
                return member
        raise ConfigError(
            f"Unknown ablation mode {value!r}; choose from "
            + ", ".join(member.value for member in cls)
        )


class PolicyBackend(enum.Enum):
    DETERMINISTIC = "deterministic"
    EXTERNAL = "external"

    @classmethod
    def parse(cls, value: str | PolicyBackend) -> PolicyBackend:
        if isinstance(value, PolicyBackend):
            return value
        try:
            return cls(value.strip().lower())
        except ValueError:
            raise ConfigError(
                "[policy] backend must be one of "
                + ", ".join(repr(member.value) for member in cls)
                + f"; got {value!r}"
            ) from None


@dataclasses.dataclass(frozen=True)
class AcceptanceConfig:
    ic_min: float = 0.015
    icir_min: float = 0.25
    coverage_min: float = 0.80
    turnover_max: float = 0.35
    rank_ic: bool = False


@dataclasses.dataclass(frozen=True)
class MinerConfig:
    fields: tuple[str, ...] = ("close", "volume", "high", "low")
    ops: tuple[str, ...] = (
        "ts_mean",
        "ts_delta",
        "ts_std",
        "ts_max",
        "ts_min",
        "ts_rank",
    )
    windows: tuple[int, ...] = (5, 10, 20, 60)
    transforms: tuple[str, ...] = ("cs_rank", "cs_zscore")
    budget: int = 40
    max_new: int = 5
    cadence: int = 63
    mining_window: int = 252
    revalidation_window: int = 63
    retention_ratio: float = 0.5


@dataclasses.dataclass(frozen=True)
class ScreenerConfig:
    min_factors: int = 3
    k: int = 5
    corr_threshold: float = 0.7
    recent_window: int = 60
    boost: float = 1.25
    damp: float = 0.75


@dataclasses.dataclass(frozen=True)
class TraderConfig:
    n_long: tuple[int, ...] = (5, 10, 20)
    n_short: tuple[int, ...] = (0, 5, 10)
    beta: float = 0.8
    # Empty means "take the profile's default net exposure bias".
    gamma: str = ""
    lookback: int = 120
    min_lookback: int = 20
    objective_lambda: float = 0.5
    search_interval: int = 1
    workers: int = 1
    high_vol_beta_scale: float = 1.0
    bull_long_only: bool = False

    def net_bias(self, profile_default: float) -> float:
        if not self.gamma.strip():
            return profile_default
        try:
            value = float(self.gamma)
        except ValueError:
            raise ConfigError(f"[trader] gamma: not a number: {self.gamma!r}") from None
        if not -1.0 <= value <= 1.0:
            raise ConfigError(f"[trader] gamma must lie in [-1, 1], got {value}")
        return value


@dataclasses.dataclass(frozen=True)
class RegimeConfig:
    trend_lookback: int = 60
    vol_window: int = 20
    corr_window: int = 20
    sigma_scale: float = 0.2
    # "train" uses the training window; "full" uses the whole panel (look-ahead).
    vol_reference: str = "train"


@dataclasses.dataclass(frozen=True)
class PolicyConfig:
    backend: str = "deterministic"
    command: str = ""
    timeout: float = 30.0

    @property
    def mode(self) -> PolicyBackend:
        return PolicyBackend.parse(self.backend)


@dataclasses.dataclass(frozen=True)
class Splits:
    train: str = ""
    valid: str = ""
    backtest: str = ""
    live: str = ""

    def range(self, name: str) -> DateRange | None:
        text = getattr(self, name)
        return DateRange.parse(text) if text else None

    def validate(self) -> None:
        ranges = []
        for name in ("train", "valid", "backtest", "live"):
            try:
                window = self.range(name)
            except ValueError as e:
                raise ConfigError(f"[splits] {name}: {e}") from e
            if window is None:
                continue
            if window.start > window.end:
                raise ConfigError(f"[splits] {name}: start is after end")
            ranges.append((name, window))
        for (first, a), (second, b) in zip(ranges, ranges[1:]):
            if not a.end < b.start:
                raise ConfigError(
                    f"[splits] {first} ({a}) must end before {second} ({b}) starts"
                )


@dataclasses.dataclass(frozen=True)
class RunConfig:
    profile: str = "csi"
    seed: int = 0
    workspace: str = "."
    data_dir: str = "data"
    initial_capital: float = 10_000_000.0
    ablation: str = "none"
    splits: Splits = dataclasses.field(default_factory=Splits)
    acceptance: AcceptanceConfig = dataclasses.field(default_factory=AcceptanceConfig)
    miner: MinerConfig = dataclasses.field(default_factory=MinerConfig)
    screener: ScreenerConfig = dataclasses.field(default_factory=ScreenerConfig)
    trader: TraderConfig = dataclasses.field(default_factory=TraderConfig)
    regime: RegimeConfig = dataclasses.field(default_factory=RegimeConfig)
    policy: PolicyConfig = dataclasses.field(default_factory=PolicyConfig)

    def __post_init__(self) -> None:
        try:
            MarketId.parse(self.profile)
        except ValueError as e:
            raise ConfigError(f"[run] profile: {e}") from e
        Ablation.parse(self.ablation)
        self.splits.validate()
        if self.initial_capital <= 0:
            raise ConfigError("[run] initial_capital must be positive")
        if self.regime.vol_reference not in ("train", "full"):
            raise ConfigError("[regime] vol_reference must be 'train' or 'full'")
        if self.policy.mode is PolicyBackend.EXTERNAL and not self.policy.command:
            raise ConfigError("[policy] command is required for the external backend")

    @property
    def market(self) -> MarketId:
        return MarketId.parse(self.profile)

    @property
    def ablation_mode(self) -> Ablation:
        return Ablation.parse(self.ablation)

    @property
    def workspace_path(self) -> Path:
        return Path(os.environ.get(WORKSPACE_ENV) or self.workspace)

    def replace(self, **changes: Any) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_SECTIONS: dict[str, type] = {
    "splits": Splits,
    "acceptance": AcceptanceConfig,
    "miner": MinerConfig,
    "screener": ScreenerConfig,
    "trader": TraderConfig,
    "regime": RegimeConfig,
    "policy": PolicyConfig,
}


def _scalar_fields(cls: type) -> list[dataclasses.Field[Any]]:
    return [
        field
        for field in dataclasses.fields(cls)
        if field.name not in _SECTIONS
    ]


def _default(field: dataclasses.Field[Any]) -> Any:
    if field.default is not dataclasses.MISSING:
        return field.default
    assert field.default_factory is not dataclasses.MISSING
    return field.default_factory()


def _convert(section: str, key: str, raw: str, default: Any) -> Any:
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "yes", "true", "on"):
                return True
            if lowered in ("0", "no", "false", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [item.strip() for item in text.split(",") if item.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(item) for item in items)
            return tuple(items)
        return text
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: {e}") from e


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(item) for item in value)
    return str(value)


def _build(cls: type, section: str, values: Mapping[str, str]) -> Any:
    fields = {field.name: field for field in _scalar_fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}")
    kwargs = {
        key: _convert(section, key, raw, _default(fields[key]))
        for key, raw in values.items()
    }
    return cls(**kwargs)


def load_config(
    path: str | os.PathLike[str] | None = None, *, check_paths: bool = False
) -> RunConfig:
    """Read an INI run configuration; a missing ``path`` gives the defaults."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as handle:
                parser.read_file(handle)
        except OSError as e:
            raise ConfigError(f"Cannot read config {str(path)!r}: {e}") from e
        except configparser.Error as e:
            raise ConfigError(f"Malformed config {str(path)!r}: {e}") from e

    unknown = sorted(set(parser.sections()) - {"run", *_SECTIONS})
    if unknown:
        raise ConfigError(f"Unknown section(s): {', '.join(unknown)}")

    parts = {
        name: _build(cls, name, dict(parser[name]) if parser.has_section(name) else {})
        for name, cls in _SECTIONS.items()
    }
    run_values = dict(parser["run"]) if parser.has_section("run") else {}
    run_fields = {field.name: field for field in _scalar_fields(RunConfig)}
    unknown_keys = sorted(set(run_values) - set(run_fields))
    if unknown_keys:
        raise ConfigError(f"[run] unknown key(s): {', '.join(unknown_keys)}")
    run_kwargs = {
        key: _convert("run", key, raw, _default(run_fields[key]))
        for key, raw in run_values.items()
    }
    config = RunConfig(**run_kwargs, **parts)

    if check_paths and path is not None:
        base = Path(path).resolve().parent
        data_dir = Path(config.data_dir)
        if not data_dir.is_absolute():
            data_dir = base / data_dir
        if not data_dir.is_dir():
            raise ConfigError(f"[run] data_dir {str(data_dir)!r} does not exist")
        config = config.replace(data_dir=str(data_dir))
    return config


def dump_config(config: RunConfig) -> str:
    """Render ``config`` as INI text that :func:`load_config` reads back."""
    sections = [("run", config, _scalar_fields(RunConfig))]
    sections.extend(
        (name, getattr(config, name), dataclasses.fields(cls))
        for name, cls in _SECTIONS.items()
    )
    lines = []
    for name, part, fields in sections:
        lines.append(f"[{name}]")
        lines.extend(
            f"{field.name} = {_render(getattr(part, field.name))}" for field in fields
        )
        lines.append("")
    return "\n".join(lines)


def example_config() -> str:
    return dump_config(RunConfig())
