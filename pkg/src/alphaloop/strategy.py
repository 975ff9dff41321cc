# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

"""
The fixed reference strategy: score assets with a weighted factor ensemble,
go long the top names and short the bottom ones under a gross exposure
``beta`` and net bias ``gamma``, and rebalance with delta orders.

Decisions for day ``t`` use data up to the close of ``t - 1``; orders fill
at the close of ``t``.
"""

from __future__ import annotations

import dataclasses
import datetime
import enum
import logging
import math
import os
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from ._fileio import atomic_write_text
from .exchange import (
    Account,
    Exchange,
    MarketProfile,
    MissingPrice,
    Order,
    OrderRejected,
    OrderSide,
)
from .expressions import FactorSignal
from .metrics import EquityCurve
from .panel import PricePanel
from .regime import RegimeAssessment

__all__ = [
    "EmptyEnsemble",
    "Ensemble",
    "EnsembleEntry",
    "InvalidTheta",
    "MarkBook",
    "Theta",
    "TransformHint",
    "UniverseTooSmall",
    "backtest",
    "composite_scores",
    "rebalance_orders",
    "select",
    "target_holdings",
    "trade_day",
    "write_targets",
]

logger = logging.getLogger(__name__)

WINSORIZE_QUANTILE = 0.05


class EmptyEnsemble(ValueError):
    """
    Scores were requested from an ensemble with no entries.
    """


class UniverseTooSmall(ValueError):
    """
    Fewer scored assets than ``n_long + n_short``.
    """


class InvalidTheta(ValueError):
    """
    Strategy parameters are out of range or not allowed on the profile.
    """


class TransformHint(enum.Enum):
    RANK = "rank"
    ZSCORE = "zscore"
    WINSORIZE = "winsorize"


@dataclasses.dataclass(frozen=True, order=True)
class Theta:
    n_long: int
    n_short: int
    beta: float
    gamma: float

    def __post_init__(self) -> None:
        if self.n_long < 1:
            raise InvalidTheta(f"n_long must be positive, got {self.n_long}")
        if self.n_short < 0:
            raise InvalidTheta(f"n_short must be non-negative, got {self.n_short}")
        if not 0.0 < self.beta <= 1.0:
            raise InvalidTheta(f"beta must lie in (0, 1], got {self.beta}")
        if not -1.0 <= self.gamma <= 1.0:
            raise InvalidTheta(f"gamma must lie in [-1, 1], got {self.gamma}")

    @property
    def effective_n_short(self) -> int:
        return 0 if self.gamma == 1.0 else self.n_short

    def check_profile(self, profile: MarketProfile) -> None:
        if not profile.allow_short and self.gamma != 1.0:
            raise InvalidTheta(
                f"The {profile.name} profile does not allow shorting; gamma must be 1"
            )

    def exposure_budget(self, nav: float) -> tuple[float, float]:
        """(V_long, V_short) for a given NAV."""
        v_long = self.beta * nav * (1 + self.gamma) / 2
        v_short = self.beta * nav * (1 - self.gamma) / 2
        return v_long, v_short

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class EnsembleEntry:
    factor_id: str
    weight: float
    direction: int
    transform_hint: TransformHint | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "factor_id": self.factor_id,
            "weight": self.weight,
            "direction": self.direction,
            "transform_hint": self.transform_hint and self.transform_hint.value,
        }


@dataclasses.dataclass(frozen=True)
class Ensemble:
    """Weighted, signed factors chosen for one day, with the regime behind them."""

    entries: tuple[EnsembleEntry, ...] = ()
    regime: RegimeAssessment | None = None

    def __post_init__(self) -> None:
        if not self.entries:
            return
        total = sum(entry.weight for entry in self.entries)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"Ensemble weights sum to {total}, not 1")
        for entry in self.entries:
            if entry.weight < 0 or entry.direction not in (-1, 1):
                raise ValueError(f"Bad ensemble entry {entry}")

    @property
    def empty(self) -> bool:
        return not self.entries

    @property
    def factor_ids(self) -> tuple[str, ...]:
        return tuple(entry.factor_id for entry in self.entries)

    @classmethod
    def equal_weight(
        cls,
        directions: Mapping[str, int],
        regime: RegimeAssessment | None = None,
    ) -> Ensemble:
        if not directions:
            return cls(regime=regime)
        weight = 1.0 / len(directions)
        entries = [
            EnsembleEntry(factor_id, weight, direction)
            for factor_id, direction in directions.items()
        ]
        # Re-balance the last weight so the sum is exactly one.
        last = entries[-1]
        entries[-1] = dataclasses.replace(
            last, weight=1.0 - sum(e.weight for e in entries[:-1])
        )
        return cls(tuple(entries), regime)

    def to_dict(self) -> dict[str, Any]:
        return {
            "entries": [entry.to_dict() for entry in self.entries],
            "regime": None if self.regime is None else self.regime.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Ensemble:
        entries = tuple(
            EnsembleEntry(
                str(entry["factor_id"]),
                float(entry["weight"]),
                int(entry["direction"]),
                TransformHint(entry["transform_hint"])
                if entry.get("transform_hint")
                else None,
            )
            for entry in data.get("entries") or ()
        )
        regime = data.get("regime")
        if regime is not None:
            regime = RegimeAssessment.from_dict(regime)
        return cls(entries, regime)


# --------------------------------------------------------------------------------------
# Scoring and selection
# --------------------------------------------------------------------------------------
def _transform(values: np.ndarray, hint: TransformHint | None) -> np.ndarray:
    if hint is None:
        return values
    finite = np.isfinite(values)
    out = np.full(values.shape, np.nan)
    if finite.sum() < 2:
        return out
    x = values[finite]
    if hint is TransformHint.RANK:
        ranks = pd.Series(x).rank(method="average").to_numpy()
        out[finite] = (ranks - 1.0) / (len(x) - 1)
    elif hint is TransformHint.ZSCORE:
        std = x.std()
        out[finite] = 0.0 if std == 0 else (x - x.mean()) / std
    else:
        lower, upper = np.quantile(x, [WINSORIZE_QUANTILE, 1 - WINSORIZE_QUANTILE])
        out[finite] = np.clip(x, lower, upper)
    return out


def _composite(
    ensemble: Ensemble,
    rows: Mapping[str, np.ndarray],
    assets: Sequence[str],
    eligible: np.ndarray | None = None,
) -> pd.Series:
    if ensemble.empty:
        raise EmptyEnsemble("The ensemble has no factors")
    total = np.zeros(len(assets))
    scored = np.ones(len(assets), dtype=bool) if eligible is None else eligible.copy()
    for entry in ensemble.entries:
        values = np.asarray(rows[entry.factor_id], dtype=np.float64)
        if eligible is not None:
            values = np.where(eligible, values, np.nan)
        values = _transform(values, entry.transform_hint)
        scored &= np.isfinite(values)
        total += entry.weight * entry.direction * np.nan_to_num(values)
    index = pd.Index(assets, name="asset")
    return pd.Series(total, index=index)[scored]


def composite_scores(
    ensemble: Ensemble,
    signals: Mapping[str, FactorSignal],
    day: datetime.date,
    eligible: np.ndarray | None = None,
) -> pd.Series:
    """Weighted signed sum of factor values per asset on ``day``.

    Assets missing any factor value are left out.
    """
    if ensemble.empty:
        raise EmptyEnsemble("The ensemble has no factors")
    first = signals[ensemble.entries[0].factor_id]
    rows = {
        entry.factor_id: signals[entry.factor_id].row(day)
        for entry in ensemble.entries
    }
    return _composite(ensemble, rows, first.assets, eligible)


def select(
    scores: pd.Series, n_long: int, n_short: int
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Top ``n_long`` and bottom ``n_short`` assets; ties go to the smaller id."""
    if n_long + n_short > len(scores):
        raise UniverseTooSmall(
            f"{n_long} long + {n_short} short exceeds {len(scores)} scored assets"
        )
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    longs = tuple(asset for asset, _ in ranked[:n_long])
    shorts = tuple(asset for asset, _ in ranked[len(ranked) - n_short :])
    return longs, shorts


def target_holdings(
    selection: tuple[Sequence[str], Sequence[str]],
    nav: float,
    theta: Theta,
    prices: Mapping[str, float],
    profile: MarketProfile,
) -> dict[str, int]:
    """Signed target share counts, floored to the profile's lot size."""
    if not nav > 0:
        raise ValueError(f"NAV must be positive, got {nav}")
    longs, shorts = selection
    v_long, v_short = theta.exposure_budget(nav)
    targets: dict[str, int] = {}

    def price_of(asset: str) -> float:
        price = prices.get(asset)
        if price is None or not math.isfinite(price) or price <= 0:
            raise MissingPrice(f"No price for {asset!r}")
        return float(price)

    for asset in longs:
        targets[asset] = profile.floor_to_lot(v_long / (len(longs) * price_of(asset)))
    if theta.effective_n_short and shorts and v_short > 0:
        for asset in shorts:
            qty = profile.floor_to_lot(v_short / (len(shorts) * price_of(asset)))
            targets[asset] = -qty
    return targets


def rebalance_orders(
    current: Account, targets: Mapping[str, int], prices: Mapping[str, float]
) -> list[Order]:
    """Orders moving ``current`` to ``targets``: liquidations first, then deltas."""
    held = current.holdings()
    orders: list[Order] = []

    def order(asset: str, side: OrderSide, qty: int) -> None:
        orders.append(
            Order(asset, side, qty, ref_price=float(prices.get(asset, 0.0) or 0.0))
        )

    for asset in sorted(held):
        if asset in targets:
            continue
        qty = held[asset]
        order(asset, OrderSide.SELL if qty > 0 else OrderSide.COVER, abs(qty))

    for asset in sorted(targets):
        now = held.get(asset, 0)
        target = targets[asset]
        if target == now:
            continue
        if now >= 0 and target >= 0:
            side = OrderSide.BUY if target > now else OrderSide.SELL
            order(asset, side, abs(target - now))
        elif now <= 0 and target <= 0:
            side = OrderSide.SHORT if target < now else OrderSide.COVER
            order(asset, side, abs(target - now))
        elif now > 0:
            order(asset, OrderSide.SELL, now)
            order(asset, OrderSide.SHORT, -target)
        else:
            order(asset, OrderSide.COVER, -now)
            order(asset, OrderSide.BUY, target)
    return orders


# --------------------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------------------
@dataclasses.dataclass
class MarkBook:
    """Last known close per asset, used to mark and size positions."""

    prices: dict[str, float] = dataclasses.field(default_factory=dict)

    def update(self, assets: Sequence[str], closes: np.ndarray) -> None:
        for asset, close in zip(assets, closes):
            if math.isfinite(close) and close > 0:
                self.prices[asset] = float(close)


def trade_day(
    exchange: Exchange,
    panel: PricePanel,
    signals: Mapping[str, FactorSignal],
    ensemble: Ensemble,
    theta: Theta,
    row: int,
    marks: MarkBook,
    *,
    target_log: list[dict[str, Any]] | None = None,
) -> list[Order]:
    """Submit today's rebalance for ``panel.days[row]`` and return the orders
    the exchange accepted. Rejections are logged and skipped.
    """
    day = panel.days[row]
    exchange.open_day(day)
    if row < 1 or ensemble.empty:
        return []
    eligible = panel.universe_mask()[row - 1] & np.isfinite(panel.close[row - 1])
    rows = {
        entry.factor_id: signals[entry.factor_id].values[row - 1]
        for entry in ensemble.entries
    }
    scores = _composite(ensemble, rows, panel.assets, eligible)
    n_short = theta.effective_n_short
    try:
        selection = select(scores, theta.n_long, n_short)
    except UniverseTooSmall as e:
        logger.info("Skipping rebalance on %s: %s", day, e)
        return []
    total = exchange.nav(marks.prices)
    if not total > 0:
        return []
    targets = target_holdings(selection, total, theta, marks.prices, exchange.profile)
    if target_log is not None:
        for asset, qty in sorted(targets.items()):
            target_log.append(
                {
                    "day": day.isoformat(),
                    "asset": asset,
                    "score": float(scores[asset]),
                    "target_qty": qty,
                }
            )
    accepted = []
    for order in rebalance_orders(exchange.account, targets, marks.prices):
        try:
            exchange.submit_order(order, order.ref_price)
        except (OrderRejected, MissingPrice) as e:
            logger.debug("Order for %s on %s rejected: %s", order.asset, day, e)
            continue
        accepted.append(order)
    return accepted


def backtest(
    panel: PricePanel,
    signals: Mapping[str, FactorSignal],
    ensemble: Ensemble,
    theta: Theta,
    profile: MarketProfile,
    rows: range,
    *,
    initial_capital: float = 10_000_000.0,
    target_log: list[dict[str, Any]] | None = None,
) -> EquityCurve:
    """Run the reference strategy on a fresh exchange over ``rows``.

    The curve starts with ``initial_capital`` on the day before ``rows``
    and adds the NAV after each settlement.
    """
    if rows.start < 1:
        raise ValueError("A backtest needs one day of history before its first row")
    theta.check_profile(profile)
    exchange = Exchange(profile, initial_capital)
    marks = MarkBook()
    marks.update(panel.assets, panel.close[rows.start - 1])
    days = [panel.days[rows.start - 1]]
    values = [float(initial_capital)]
    for row in rows:
        trade_day(
            exchange, panel, signals, ensemble, theta, row, marks, target_log=target_log
        )
        closes = panel.close[row]
        exchange.settle_day(
            panel.days[row],
            {a: float(c) for a, c in zip(panel.assets, closes) if math.isfinite(c)},
        )
        marks.update(panel.assets, closes)
        days.append(panel.days[row])
        values.append(exchange.nav(marks.prices))
    return EquityCurve.for_profile(days, values, profile)


def write_targets(
    path: str | os.PathLike[str], rows: Iterable[Mapping[str, Any]]
) -> Path:
    frame = pd.DataFrame(list(rows), columns=["day", "asset", "score", "target_qty"])
    return atomic_write_text(path, frame.to_csv(index=False))
