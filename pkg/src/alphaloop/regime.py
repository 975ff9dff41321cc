# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

"""
Market regime assessment on three axes (trend, volatility, correlation),
each scored in ``[0, 1]`` and labelled with one of five ordinal levels.
"""

from __future__ import annotations

import dataclasses
import datetime
import enum
import itertools
import logging
import math
from typing import Any, Mapping

import numpy as np
import pandas as pd

from .config import RegimeConfig

__all__ = [
    "CorrLabel",
    "InsufficientHistory",
    "RegimeAssessment",
    "RegimeAssessor",
    "TrendLabel",
    "VolLabel",
    "assess_regime",
    "label_index",
    "realized_vol_series",
    "vol_quantiles",
]

logger = logging.getLogger(__name__)


class InsufficientHistory(ValueError):
    """
    Not enough prior days of index or constituent data for the assessment.
    """


class _Level(enum.Enum):
    @property
    def level(self) -> int:
        return list(type(self)).index(self)

    @property
    def numeric(self) -> float:
        """The label's position on ``[0, 1]``: 0, 0.25, 0.5, 0.75 or 1."""
        return self.level / 4


class TrendLabel(_Level):
    STRONG_DOWNTREND = "strong downtrend"
    DOWNTREND = "downtrend"
    RANGE_BOUND = "range-bound"
    UPTREND = "uptrend"
    STRONG_UPTREND = "strong uptrend"


class VolLabel(_Level):
    VERY_LOW = "very low"
    LOW = "low"
    MODERATE = "moderate"
    HIGH = "high"
    VERY_HIGH = "very high"


class CorrLabel(_Level):
    VERY_LOW = "very low"
    LOW = "low"
    MODERATE = "moderate"
    HIGH = "high"
    VERY_HIGH = "very high"


def label_index(value: float) -> int:
    """Nearest of {0, .25, .5, .75, 1}; exact midpoints round down."""
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"Regime value {value} is outside [0, 1]")
    return min(4, max(0, math.ceil(4 * value - 0.5)))


@dataclasses.dataclass(frozen=True)
class RegimeAssessment:
    as_of: datetime.date
    trend_value: float
    vol_value: float
    corr_value: float

    @property
    def trend_label(self) -> TrendLabel:
        return list(TrendLabel)[label_index(self.trend_value)]

    @property
    def vol_label(self) -> VolLabel:
        return list(VolLabel)[label_index(self.vol_value)]

    @property
    def corr_label(self) -> CorrLabel:
        return list(CorrLabel)[label_index(self.corr_value)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "as_of": self.as_of.isoformat(),
            "trend_value": self.trend_value,
            "vol_value": self.vol_value,
            "corr_value": self.corr_value,
            "trend_label": self.trend_label.value,
            "vol_label": self.vol_label.value,
            "corr_label": self.corr_label.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RegimeAssessment:
        return cls(
            as_of=datetime.date.fromisoformat(data["as_of"]),
            trend_value=float(data["trend_value"]),
            vol_value=float(data["vol_value"]),
            corr_value=float(data["corr_value"]),
        )


def _log_returns(closes: np.ndarray) -> np.ndarray:
    closes = np.asarray(closes, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.diff(np.log(closes))


def realized_vol_series(
    index_close: np.ndarray | pd.Series, days_per_year: int, window: int = 20
) -> pd.Series:
    """Annualized realized volatility of log returns over a trailing window.

    Entry ``t`` uses the ``window`` returns ending at ``t``; earlier entries
    are missing.
    """
    closes = pd.Series(np.asarray(index_close, dtype=np.float64))
    returns = np.log(closes).diff()
    return returns.rolling(window, min_periods=window).std(ddof=1) * math.sqrt(
        days_per_year
    )


def vol_quantiles(
    index_close: np.ndarray | pd.Series, days_per_year: int, window: int = 20
) -> tuple[float, float]:
    """The 5th and 95th percentiles of realized volatility over a sample."""
    series = realized_vol_series(index_close, days_per_year, window).dropna()
    if series.empty:
        raise InsufficientHistory(
            f"Volatility reference needs more than {window} index closes"
        )
    return float(series.quantile(0.05)), float(series.quantile(0.95))


def _trend_value(closes: np.ndarray, lookback: int, sigma0: float) -> float:
    r = math.log(closes[-1] / closes[-1 - lookback])
    z = r / sigma0
    # Logistic, computed on the stable side.
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _corr_value(returns: np.ndarray) -> float:
    complete = returns[:, np.all(np.isfinite(returns), axis=0)]
    varying = complete[:, complete.std(axis=0) > 0]
    if varying.shape[1] < 2:
        return 0.0
    matrix = np.corrcoef(varying, rowvar=False)
    pairs = [
        abs(matrix[i, j])
        for i, j in itertools.combinations(range(matrix.shape[0]), 2)
    ]
    return float(min(1.0, max(0.0, np.mean(pairs))))


def assess_regime(
    index_close: np.ndarray | pd.Series,
    constituent_returns: np.ndarray,
    day: datetime.date,
    days_per_year: int,
    *,
    quantiles: tuple[float, float],
    config: RegimeConfig | None = None,
) -> RegimeAssessment:
    """Assess the regime as of the close of ``day``.

    ``index_close`` and ``constituent_returns`` hold history up to and
    including ``day`` (oldest first); only their trailing windows are used.
    """
    config = config or RegimeConfig()
    closes = np.asarray(index_close, dtype=np.float64)
    closes = closes[np.isfinite(closes)]
    if len(closes) < config.trend_lookback + 1:
        raise InsufficientHistory(
            f"Trend needs {config.trend_lookback + 1} index closes, got {len(closes)}"
        )
    returns = np.asarray(constituent_returns, dtype=np.float64)
    if returns.ndim != 2 or returns.shape[0] < config.corr_window:
        raise InsufficientHistory(
            f"Correlation needs {config.corr_window} days of constituent returns"
        )

    sigma0 = config.sigma_scale * math.sqrt(config.trend_lookback / days_per_year)
    trend = _trend_value(closes, config.trend_lookback, sigma0)

    window_returns = _log_returns(closes[-(config.vol_window + 1) :])
    sigma = float(np.std(window_returns, ddof=1)) * math.sqrt(days_per_year)
    q05, q95 = quantiles
    if q95 > q05:
        vol = min(1.0, max(0.0, (sigma - q05) / (q95 - q05)))
    else:
        logger.debug("Degenerate volatility reference (q05=%g, q95=%g)", q05, q95)
        vol = 0.5

    corr = _corr_value(returns[-config.corr_window :])
    return RegimeAssessment(day, trend, vol, corr)


class RegimeAssessor:
    """Assesses regimes over one panel's market index with fixed quantiles."""

    def __init__(
        self,
        index_close: np.ndarray,
        returns: np.ndarray,
        days: tuple[datetime.date, ...],
        days_per_year: int,
        *,
        quantiles: tuple[float, float],
        config: RegimeConfig | None = None,
    ) -> None:
        self.index_close = np.asarray(index_close, dtype=np.float64)
        self.returns = np.asarray(returns, dtype=np.float64)
        self.days = days
        self.days_per_year = days_per_year
        self.quantiles = quantiles
        self.config = config or RegimeConfig()

    def assess(self, row: int) -> RegimeAssessment:
        """The assessment as of the close of ``days[row]``."""
        return assess_regime(
            self.index_close[: row + 1],
            self.returns[: row + 1],
            self.days[row],
            self.days_per_year,
            quantiles=self.quantiles,
            config=self.config,
        )

    def proxies(self, row: int) -> tuple[float, float, float]:
        """Market proxy values (trend, vol, corr) as of ``days[row]``."""
        assessment = self.assess(row)
        return (assessment.trend_value, assessment.vol_value, assessment.corr_value)
