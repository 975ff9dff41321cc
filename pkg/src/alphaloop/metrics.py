# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

"""
Performance metrics over an equity curve: annualized return, Sharpe ratio
and maximum drawdown.
"""

from __future__ import annotations

import dataclasses
import datetime
import logging
import math
from typing import Any, Sequence

import numpy as np

from .exchange import MarketProfile

__all__ = [
    "CurveTooShort",
    "EquityCurve",
    "ZeroVolatility",
    "annualized_return",
    "max_drawdown",
    "metrics_report",
    "sharpe",
]

logger = logging.getLogger(__name__)


class CurveTooShort(ValueError):
    """
    The equity curve has too few points for the requested metric.
    """


class ZeroVolatility(ValueError):
    """
    Daily returns have zero sample standard deviation, so the Sharpe ratio is
    undefined.
    """


@dataclasses.dataclass(frozen=True)
class EquityCurve:
    """Portfolio values ``V_0 .. V_T`` on consecutive trading days."""

    days: tuple[datetime.date, ...]
    values: tuple[float, ...]
    days_per_year: int
    rf_annual: float = 0.0
    profile: str = ""

    def __post_init__(self) -> None:
        if len(self.days) != len(self.values):
            raise ValueError(
                f"{len(self.days)} days but {len(self.values)} portfolio values"
            )
        if any(b <= a for a, b in zip(self.days, self.days[1:])):
            raise ValueError("Equity curve days must be strictly increasing")
        if self.values and not self.values[0] > 0:
            raise ValueError(
                f"Initial portfolio value must be positive, got {self.values[0]}"
            )

    @classmethod
    def for_profile(
        cls,
        days: Sequence[datetime.date],
        values: Sequence[float],
        profile: MarketProfile,
    ) -> EquityCurve:
        return cls(
            tuple(days),
            tuple(float(v) for v in values),
            profile.days_per_year,
            profile.rf_annual,
            profile.name,
        )

    @property
    def periods(self) -> int:
        """T, the number of daily steps."""
        return max(len(self.values) - 1, 0)

    @property
    def ruined(self) -> bool:
        return bool(self.values) and self.values[-1] <= 0

    def returns(self) -> np.ndarray:
        values = np.asarray(self.values, dtype=np.float64)
        return values[1:] / values[:-1] - 1.0

    def scaled(self, factor: float) -> EquityCurve:
        return dataclasses.replace(self, values=tuple(v * factor for v in self.values))


def annualized_return(curve: EquityCurve) -> float:
    """``(1 + R_total) ** (D / T) - 1``; a ruined curve gives -1.0."""
    if curve.periods < 1:
        raise CurveTooShort("Annualized return needs at least two portfolio values")
    v0, vt = curve.values[0], curve.values[-1]
    if vt <= 0:
        logger.warning("Equity curve ends at %.2f; annualized return set to -100%%", vt)
        return -1.0
    return float((vt / v0) ** (curve.days_per_year / curve.periods) - 1.0)


def sharpe(curve: EquityCurve) -> float:
    """Annualized Sharpe ratio of daily returns with a sample (T - 1) std."""
    if curve.periods < 2:
        raise CurveTooShort("Sharpe ratio needs at least three portfolio values")
    returns = curve.returns()
    std = float(np.std(returns, ddof=1))
    if not std > 0:
        raise ZeroVolatility("Daily returns have zero standard deviation")
    rf_daily = curve.rf_annual / curve.days_per_year
    return float(math.sqrt(curve.days_per_year) * (returns.mean() - rf_daily) / std)


def max_drawdown(curve: EquityCurve | Sequence[float]) -> float:
    """Largest peak-to-trough decline as a non-positive fraction."""
    values = np.asarray(
        curve.values if isinstance(curve, EquityCurve) else curve, dtype=np.float64
    )
    if values.size < 2:
        return 0.0
    peak = np.maximum.accumulate(values)
    return float(min(0.0, ((values - peak) / peak).min()))


def metrics_report(curve: EquityCurve) -> dict[str, Any]:
    """The metrics JSON payload; an undefined Sharpe ratio is ``None``."""
    try:
        sr: float | None = sharpe(curve)
    except (ZeroVolatility, CurveTooShort):
        sr = None
    try:
        ar: float | None = annualized_return(curve)
    except CurveTooShort:
        ar = None
    return {
        "ar": ar,
        "sr": sr,
        "mdd": max_drawdown(curve),
        "days": curve.periods,
        "profile": curve.profile,
        "ruined": curve.ruined,
    }
