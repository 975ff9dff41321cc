# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

import datetime
import math

import numpy as np
import pytest

from alphaloop.config import RegimeConfig
from alphaloop.regime import (
    CorrLabel,
    InsufficientHistory,
    RegimeAssessment,
    RegimeAssessor,
    TrendLabel,
    VolLabel,
    assess_regime,
    label_index,
    realized_vol_series,
    vol_quantiles,
)

DAY = datetime.date(2024, 6, 3)
SIGMA0_US = 0.2 * math.sqrt(60 / 252)


def noisy_returns(n_days=30, n_assets=4, seed=0):
    return np.random.default_rng(seed).normal(0.0, 0.01, (n_days, n_assets))


def assess(closes, returns=None, *, quantiles=(0.1, 0.3), dpy=252):
    returns = noisy_returns() if returns is None else returns
    return assess_regime(closes, returns, DAY, dpy, quantiles=quantiles)


class TestLabels:
    @pytest.mark.parametrize(
        ("value", "index"),
        [
            (0.0, 0),
            (0.12, 0),
            (0.125, 0),
            (0.13, 1),
            (0.5, 2),
            (0.7, 3),
            (0.875, 3),
            (0.9, 4),
            (1.0, 4),
        ],
    )
    def test_nearest_level(self, value, index):
        assert label_index(value) == index

    def test_nearest_of_five_on_random_values(self):
        values = np.random.default_rng(8).uniform(0.0, 1.0, 1000).tolist()
        values += [k / 8 for k in range(9)]
        for value in values:
            nearest = min(range(5), key=lambda i: (abs(value - i / 4), i))
            assert label_index(value) == nearest, value
            labels = RegimeAssessment(DAY, value, value, value)
            assert labels.trend_label is list(TrendLabel)[nearest]
            assert labels.vol_label.numeric == nearest / 4
            assert labels.corr_label is list(CorrLabel)[nearest]

    @pytest.mark.parametrize("value", [-0.01, 1.01, math.nan])
    def test_out_of_range(self, value):
        with pytest.raises(ValueError):
            label_index(value)

    def test_assessment_labels(self):
        assessment = RegimeAssessment(DAY, 0.95, 0.3, 0.0)
        assert assessment.trend_label is TrendLabel.STRONG_UPTREND
        assert assessment.vol_label is VolLabel.LOW
        assert assessment.corr_label is CorrLabel.VERY_LOW
        assert TrendLabel.RANGE_BOUND.numeric == 0.5
        assert VolLabel.VERY_HIGH.numeric == 1.0

    def test_dict(self):
        assessment = RegimeAssessment(DAY, 0.5, 0.25, 0.75)
        data = assessment.to_dict()
        assert data["trend_label"] == "range-bound"
        assert data["corr_label"] == "high"
        assert RegimeAssessment.from_dict(data) == assessment


class TestTrend:
    def test_flat_index(self):
        assert assess(np.full(61, 100.0)).trend_value == 0.5

    def test_one_sigma_rise(self):
        closes = 100.0 * np.exp(np.linspace(0.0, SIGMA0_US, 61))
        assert assess(closes).trend_value == pytest.approx(1 / (1 + math.exp(-1)))

    def test_one_sigma_fall(self):
        closes = 100.0 * np.exp(np.linspace(0.0, -SIGMA0_US, 61))
        assert assess(closes).trend_value == pytest.approx(1 / (1 + math.e))

    def test_uses_trailing_lookback_only(self):
        closes = np.concatenate([[1.0, 500.0], np.full(61, 100.0)])
        assert assess(closes).trend_value == 0.5

    def test_extreme_move_does_not_overflow(self):
        closes = np.concatenate([[100.0], np.full(60, 1e-200)])
        assert assess(closes).trend_value == pytest.approx(0.0, abs=1e-12)

    def test_insufficient_history(self):
        with pytest.raises(InsufficientHistory):
            assess(np.full(60, 100.0))
        with pytest.raises(InsufficientHistory):
            assess(np.full(61, 100.0), noisy_returns(n_days=10))


class TestVolatility:
    def test_clamped_low(self):
        assert assess(np.full(61, 100.0)).vol_value == 0.0

    def test_clamped_high(self):
        rng = np.random.default_rng(1)
        closes = 100.0 * np.exp(np.cumsum(rng.normal(0.0, 0.1, 61)))
        assert assess(closes).vol_value == 1.0

    def test_interpolates(self):
        rng = np.random.default_rng(2)
        closes = 100.0 * np.exp(np.cumsum(rng.normal(0.0, 0.01, 61)))
        sigma = realized_vol_series(closes, 252).iloc[-1]
        value = assess(closes, quantiles=(sigma - 0.1, sigma + 0.3)).vol_value
        assert value == pytest.approx(0.25)

    def test_degenerate_reference(self):
        assert assess(np.full(61, 100.0), quantiles=(0.2, 0.2)).vol_value == 0.5

    def test_quantiles(self):
        rng = np.random.default_rng(3)
        closes = 100.0 * np.exp(np.cumsum(rng.normal(0.0, 0.01, 200)))
        q05, q95 = vol_quantiles(closes, 252)
        assert 0 < q05 < q95
        with pytest.raises(InsufficientHistory):
            vol_quantiles(closes[:20], 252)


class TestCorrelation:
    def test_identical_constituents(self):
        column = np.random.default_rng(4).normal(0, 0.01, (30, 1))
        returns = np.hstack([column, 2 * column, -column])
        assert assess(np.full(61, 100.0), returns).corr_value == pytest.approx(1.0)

    def test_too_few_varying_constituents(self):
        returns = np.zeros((30, 3))
        returns[:, 0] = noisy_returns(n_assets=1)[:, 0]
        assert assess(np.full(61, 100.0), returns).corr_value == 0.0

    def test_missing_values_drop_the_asset(self):
        returns = noisy_returns(n_assets=3)
        returns[-1, 2] = np.nan
        full = assess(np.full(61, 100.0), returns[:, :2]).corr_value
        assert assess(np.full(61, 100.0), returns).corr_value == pytest.approx(full)


class TestAssessor:
    def test_point_in_time(self):
        rng = np.random.default_rng(5)
        closes = 100.0 * np.exp(np.cumsum(rng.normal(0.0, 0.01, 100)))
        returns = rng.normal(0.0, 0.01, (100, 5))
        days = tuple(DAY + datetime.timedelta(days=i) for i in range(100))
        config = RegimeConfig()
        assessor = RegimeAssessor(
            closes, returns, days, 252, quantiles=(0.1, 0.3), config=config
        )
        shocked = closes.copy()
        shocked[80:] *= 3.0
        other = RegimeAssessor(
            shocked, returns, days, 252, quantiles=(0.1, 0.3), config=config
        )
        assert assessor.assess(79) == other.assess(79)
        assert assessor.assess(79).as_of == days[79]
        assert assessor.assess(90) != other.assess(90)
        assert assessor.proxies(79) == (
            assessor.assess(79).trend_value,
            assessor.assess(79).vol_value,
            assessor.assess(79).corr_value,
        )
