# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

import json

import numpy as np
import pytest

from alphaloop.config import ConfigError
from alphaloop.expressions import FactorExpr, evaluate
from alphaloop.factors import ic_series
from alphaloop.panel import load_panel
from alphaloop.synthetic import SyntheticSpec, synthetic_panel, write_synthetic


def mean_ic(panel, text, rows):
    values = evaluate(FactorExpr(text), panel).values
    return float(ic_series(values[rows], panel.forward_return(1)[rows]).mean())


class TestSyntheticSpec:
    def test_switch(self):
        assert SyntheticSpec(days=100).switch == 50
        assert SyntheticSpec(days=100, switch_day=10).switch == 10

    @pytest.mark.parametrize(
        ("kwargs", "match"),
        [
            ({"assets": 1}, "assets"),
            ({"days": 1}, "days"),
            ({"strength": 1.0}, "strength"),
            ({"switch_day": 600}, "switch_day"),
            ({"factor_a": "cs_rank(close)"}, "may only read"),
        ],
    )
    def test_invalid(self, kwargs, match):
        with pytest.raises(ConfigError, match=match):
            SyntheticSpec(**kwargs)

    def test_driver_can_be_disabled(self):
        assert SyntheticSpec(factor_b="").factor_b == ""

    def test_from_json(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps({"seed": 4, "drift": [0.001, 0.0]}))
        spec = SyntheticSpec.from_json(path)
        assert spec.seed == 4
        assert spec.drift == (0.001, 0.0)

    @pytest.mark.parametrize(
        ("text", "match"),
        [("{", "spec.json"), ("[1]", "JSON object"), ('{"colour": 1}', "colour")],
    )
    def test_bad_json(self, tmp_path, text, match):
        path = tmp_path / "spec.json"
        path.write_text(text)
        with pytest.raises(ConfigError, match=match):
            SyntheticSpec.from_json(path)


class TestSyntheticPanel:
    def test_seeded(self):
        spec = SyntheticSpec(seed=2, assets=5, days=40)
        first, second = synthetic_panel(spec), synthetic_panel(spec)
        assert np.array_equal(first.close, second.close)
        assert first.digest() == second.digest()
        other = synthetic_panel(SyntheticSpec(seed=3, assets=5, days=40))
        assert not np.array_equal(first.close, other.close)

    def test_bars(self, switch_panel, switch_spec):
        assert switch_panel.close.shape == (switch_spec.days, switch_spec.assets)
        high, low = switch_panel.field("high"), switch_panel.field("low")
        opens, close = switch_panel.field("open"), switch_panel.close
        assert (high >= np.maximum(opens, close)).all()
        assert (low <= np.minimum(opens, close)).all()
        assert (switch_panel.field("volume") > 0).all()
        assert switch_panel.market_index()["close"].iloc[0] == 1000.0

    def test_drivers_switch(self, switch_panel, switch_spec):
        before = slice(10, switch_spec.switch - 1)
        after = slice(switch_spec.switch + 10, switch_spec.days - 1)
        volume, book = switch_spec.factor_a, switch_spec.factor_b
        assert mean_ic(switch_panel, volume, before) > 0.3
        assert abs(mean_ic(switch_panel, volume, after)) < 0.15
        assert abs(mean_ic(switch_panel, book, before)) < 0.15
        assert mean_ic(switch_panel, book, after) > 0.3

    def test_no_drivers(self):
        panel = synthetic_panel(
            SyntheticSpec(seed=1, assets=30, days=200, factor_a="", factor_b="")
        )
        rows = slice(10, 199)
        assert abs(mean_ic(panel, "cs_rank(ts_mean(volume,5))", rows)) < 0.1


class TestWriteSynthetic:
    def test_loads_back(self, tmp_path):
        spec = SyntheticSpec(seed=6, assets=4, days=30, profile="us")
        written = write_synthetic(spec, tmp_path / "data")
        names = sorted(path.name for path in written)
        assert names == [
            "S000.csv",
            "S001.csv",
            "S002.csv",
            "S003.csv",
            "fundamentals.csv",
            "index.csv",
        ]
        original = synthetic_panel(spec)
        loaded = load_panel(tmp_path / "data", "us")
        assert loaded.assets == original.assets
        assert loaded.days == original.days
        np.testing.assert_allclose(loaded.close, original.close)
        np.testing.assert_allclose(loaded.field("pb"), original.field("pb"))
        np.testing.assert_allclose(
            loaded.market_index()["close"], original.market_index()["close"]
        )
