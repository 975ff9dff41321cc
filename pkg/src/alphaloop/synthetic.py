# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

"""
Seeded synthetic market data: a regime switch in market drift and
volatility, with idiosyncratic returns driven by one factor expression
before the switch day and another after it.
"""

from __future__ import annotations

import dataclasses
import datetime
import json
import logging
import os
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd

from ._fileio import atomic_write_text
from .config import ConfigError
from .expressions import FactorExpr, evaluate
from .panel import (
    FUNDAMENTAL_FIELDS,
    MarketId,
    PricePanel,
    TradingCalendar,
)

__all__ = ["EXOGENOUS_FIELDS", "SyntheticSpec", "synthetic_panel", "write_synthetic"]

logger = logging.getLogger(__name__)

# Fields simulated before prices, so driving factors can only read these.
EXOGENOUS_FIELDS = frozenset({"volume", *FUNDAMENTAL_FIELDS})


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    assets: int = 20
    days: int = 500
    start: str = "2020-01-01"
    profile: str = "csi"
    switch_day: int | None = None
    factor_a: str = "cs_rank(ts_mean(volume,5))"
    factor_b: str = "cs_rank(neg(pb))"
    strength: float = 0.15
    drift: tuple[float, float] = (0.0008, -0.0004)
    market_vol: tuple[float, float] = (0.008, 0.02)
    idio_vol: float = 0.015
    start_price: float = 50.0

    def __post_init__(self) -> None:
        if self.assets < 2:
            raise ConfigError("[synthetic] assets must be at least 2")
        if self.days < 2:
            raise ConfigError("[synthetic] days must be at least 2")
        if not 0 <= self.strength < 1:
            raise ConfigError("[synthetic] strength must lie in [0, 1)")
        if self.switch_day is not None and not 0 <= self.switch_day <= self.days:
            raise ConfigError("[synthetic] switch_day must lie within the days")
        for name in ("factor_a", "factor_b"):
            text = getattr(self, name)
            if not text:
                continue
            fields = FactorExpr(text).fields
            if not fields <= EXOGENOUS_FIELDS:
                raise ConfigError(
                    f"[synthetic] {name} may only read "
                    f"{', '.join(sorted(EXOGENOUS_FIELDS))}; got "
                    f"{', '.join(sorted(fields - EXOGENOUS_FIELDS))}"
                )

    @property
    def switch(self) -> int:
        return self.days // 2 if self.switch_day is None else self.switch_day

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SyntheticSpec:
        known = {field.name for field in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"[synthetic] unknown keys: {', '.join(unknown)}")
        values = dict(data)
        for key in ("drift", "market_vol"):
            if key in values:
                values[key] = tuple(float(v) for v in values[key])
        return cls(**values)

    @classmethod
    def from_json(cls, path: str | os.PathLike[str]) -> SyntheticSpec:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)


def _calendar(spec: SyntheticSpec) -> TradingCalendar:
    start = datetime.date.fromisoformat(spec.start)
    days = pd.bdate_range(start, periods=spec.days)
    return TradingCalendar(
        MarketId.parse(spec.profile), tuple(day.date() for day in days)
    )


def _log_ar1(
    rng: np.random.Generator,
    shape: tuple[int, int],
    centre: np.ndarray,
    phi: float,
    scale: float,
) -> np.ndarray:
    out = np.empty(shape)
    out[0] = centre
    shocks = rng.normal(0.0, scale, shape)
    for row in range(1, shape[0]):
        out[row] = centre + phi * (out[row - 1] - centre) + shocks[row]
    return np.exp(out)


def _driver(
    text: str,
    calendar: TradingCalendar,
    assets: tuple[str, ...],
    fields: dict[str, np.ndarray],
) -> np.ndarray:
    """Cross-sectional z-scores of a driving factor, zero where missing."""
    shape = (len(calendar), len(assets))
    if not text:
        return np.zeros(shape)
    flat = np.ones(shape)
    provisional = PricePanel(
        calendar,
        assets,
        {"open": flat, "high": flat, "low": flat, "close": flat, **fields},
    )
    values = evaluate(FactorExpr(text), provisional).values
    with np.errstate(invalid="ignore"):
        mean = np.nanmean(values, axis=1, keepdims=True)
        std = np.nanstd(values, axis=1, keepdims=True)
        z = np.where(std > 0, (values - mean) / np.where(std > 0, std, 1.0), 0.0)
    return np.nan_to_num(z)


def synthetic_panel(spec: SyntheticSpec) -> PricePanel:
    """Build the panel ``spec`` describes, with an index file's bars."""
    rng = np.random.default_rng(spec.seed)
    calendar = _calendar(spec)
    n_days, n_assets = spec.days, spec.assets
    assets = tuple(f"S{i:03d}" for i in range(n_assets))
    shape = (n_days, n_assets)

    volume_centre = rng.normal(13.0, 0.5, n_assets)
    exogenous = {"volume": np.round(_log_ar1(rng, shape, volume_centre, 0.9, 0.3))}
    for name, centre in (("pe", 2.8), ("ps", 0.7), ("pb", 0.5), ("dyr", -4.0)):
        exogenous[name] = _log_ar1(
            rng, shape, rng.normal(centre, 0.4, n_assets), 0.995, 0.02
        )

    switch = spec.switch
    rows = np.arange(n_days)
    lagged = {}
    for name, text in (("a", spec.factor_a), ("b", spec.factor_b)):
        z = _driver(text, calendar, assets, exogenous)
        # Returns on row t load on the factor as of row t - 1.
        lagged[name] = np.vstack([np.zeros((1, n_assets)), z[:-1]])
    driver = np.where((rows < switch)[:, None], lagged["a"], lagged["b"])
    loading = spec.strength * spec.idio_vol / np.sqrt(1.0 - spec.strength**2)

    regime = (rows >= switch).astype(int)
    drift = np.asarray(spec.drift)[regime]
    vol = np.asarray(spec.market_vol)[regime]
    market = drift + vol * rng.standard_normal(n_days)
    market[0] = 0.0
    idio = rng.normal(0.0, spec.idio_vol, shape)
    idio[0] = 0.0
    returns = np.clip(market[:, None] + loading * driver + idio, -0.5, 0.5)

    close = spec.start_price * np.cumprod(1.0 + returns, axis=0)
    prior = np.vstack([np.full((1, n_assets), spec.start_price), close[:-1]])
    opens = prior * (1.0 + rng.normal(0.0, 0.002, shape))
    high = np.maximum(opens, close) * (1.0 + np.abs(rng.normal(0.0, 0.004, shape)))
    low = np.minimum(opens, close) * (1.0 - np.abs(rng.normal(0.0, 0.004, shape)))

    level = 1000.0 * np.cumprod(1.0 + market)
    level_prior = np.concatenate([[1000.0], level[:-1]])
    index_open = level_prior * (1.0 + rng.normal(0.0, 0.001, n_days))
    index_bars = {
        "open": index_open,
        "high": np.maximum(index_open, level) * (1.0 + 0.5 * vol),
        "low": np.minimum(index_open, level) * (1.0 - 0.5 * vol),
        "close": level,
    }
    fields = {"open": opens, "high": high, "low": low, "close": close, **exogenous}
    logger.info(
        "Generated %d assets over %d days, switching drivers on row %d",
        n_assets,
        n_days,
        switch,
    )
    return PricePanel(calendar, assets, fields, index_bars=index_bars)


def write_synthetic(
    spec: SyntheticSpec, directory: str | os.PathLike[str]
) -> list[Path]:
    """Write the panel as per-asset bars, ``fundamentals.csv`` and
    ``index.csv`` in the layout :func:`~alphaloop.panel.load_panel` reads."""
    panel = synthetic_panel(spec)
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    dates = [day.isoformat() for day in panel.days]
    written = []
    for column, asset in enumerate(panel.assets):
        frame = pd.DataFrame(
            {
                "date": dates,
                **{
                    name: panel.field(name)[:, column]
                    for name in ("open", "high", "low", "close", "volume")
                },
            }
        )
        written.append(
            atomic_write_text(out / f"{asset}.csv", frame.to_csv(index=False))
        )

    rows = []
    for column, asset in enumerate(panel.assets):
        for row, date in enumerate(dates):
            rows.append(
                {
                    "date": date,
                    "asset": asset,
                    **{
                        name: panel.field(name)[row, column]
                        for name in FUNDAMENTAL_FIELDS
                    },
                }
            )
    fundamentals = pd.DataFrame(rows, columns=["date", "asset", *FUNDAMENTAL_FIELDS])
    written.append(
        atomic_write_text(out / "fundamentals.csv", fundamentals.to_csv(index=False))
    )

    index = panel.market_index().reset_index()
    index["date"] = dates
    index["volume"] = 0.0
    written.append(
        atomic_write_text(
            out / "index.csv",
            index[["date", "open", "high", "low", "close", "volume"]].to_csv(
                index=False
            ),
        )
    )
    return written
