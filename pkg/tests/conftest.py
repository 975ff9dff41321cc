# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

import dataclasses
import datetime

import numpy as np
import pandas as pd
import pytest

from alphaloop.panel import MarketId, PricePanel, TradingCalendar
from alphaloop.synthetic import SyntheticSpec, synthetic_panel


def business_days(n, start="2024-01-01"):
    return tuple(day.date() for day in pd.bdate_range(start, periods=n))


def build_panel(close, *, profile="csi", volume=None, start="2024-01-01", **extra):
    """A panel whose bars are flat at ``close`` (open = high = low = close)."""
    close = np.asarray(close, dtype=float)
    if close.ndim == 1:
        close = close[:, None]
    n_days, n_assets = close.shape
    calendar = TradingCalendar(MarketId.parse(profile), business_days(n_days, start))
    assets = tuple(f"A{i}" for i in range(n_assets))
    fields = {
        "open": close,
        "high": close,
        "low": close,
        "close": close,
        "volume": np.full(close.shape, 1000.0) if volume is None else volume,
        **{name: np.asarray(values, dtype=float) for name, values in extra.items()},
    }
    return PricePanel(calendar, assets, fields)


@pytest.fixture
def make_panel():
    return build_panel


@pytest.fixture
def random_panel():
    rng = np.random.default_rng(3)
    returns = rng.normal(0.0005, 0.02, (120, 8))
    close = 20.0 * np.cumprod(1.0 + returns, axis=0)
    volume = rng.uniform(1e5, 1e6, close.shape)
    return build_panel(close, volume=volume)


@pytest.fixture(scope="session")
def switch_spec():
    return SyntheticSpec(seed=11, assets=40, days=320, strength=0.5)


@pytest.fixture(scope="session")
def switch_panel(switch_spec):
    return synthetic_panel(switch_spec)


@pytest.fixture(scope="session")
def flip_panel(switch_spec):
    """The switch market, except the second driver is the first one negated."""
    spec = dataclasses.replace(switch_spec, factor_b="cs_rank(neg(ts_mean(volume,5)))")
    return synthetic_panel(spec)


@pytest.fixture
def day():
    return datetime.date(2024, 1, 2)
