# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

import math

import pytest

from alphaloop.config import (
    Ablation,
    MinerConfig,
    RegimeConfig,
    RunConfig,
    ScreenerConfig,
    TraderConfig,
)
from alphaloop.expressions import FactorExpr
from alphaloop.factors import (
    FactorLibrary,
    FactorRecord,
    FactorStatus,
    ValidationReport,
    factor_id_for,
    infer_category,
    validate,
)
from alphaloop.loop import (
    LibrarySnapshot,
    build_assessor,
    classical_library,
    iqr_trimmed_mean,
    market_proxies,
    run_loop,
    run_reference,
    run_trials,
)
from alphaloop.memory import MetaTag
from alphaloop.panel import DateRange
from alphaloop.regime import InsufficientHistory
from alphaloop.strategy import Theta
from alphaloop.synthetic import SyntheticSpec, synthetic_panel


@pytest.fixture(scope="module")
def panel():
    return synthetic_panel(SyntheticSpec(seed=5, assets=12, days=90, strength=0.5))


@pytest.fixture
def config():
    return RunConfig(
        initial_capital=1e6,
        miner=MinerConfig(budget=6, max_new=2, cadence=30, mining_window=60),
        screener=ScreenerConfig(min_factors=1, k=2),
        trader=TraderConfig(n_long=(3, 5), lookback=20, min_lookback=5),
    )


class TestClassicalLibrary:
    def test_all_fields_present(self, panel):
        library = classical_library(panel)
        assert len(library) == 20
        assert all(r.status is FactorStatus.EFFECTIVE for r in library)

    def test_skips_missing_fields(self, make_panel):
        library = classical_library(make_panel([[1.0, 2.0]] * 3))
        assert all(not r.expr.fields & {"pe", "pb", "ps", "dyr"} for r in library)
        assert len(library) == 16


class TestRunLoop:
    def test_equity_curve(self, panel, config):
        result = run_loop(panel, config)
        assert result.equity.days == panel.days
        assert result.equity.values[0] == 1e6
        assert len(result.net_positions) == len(panel.days) - 1
        assert len(result.accounts) == len(panel.days) - 1
        assert result.ablation is Ablation.NONE
        assert set(result.metrics()) == {
            "ar",
            "sr",
            "mdd",
            "days",
            "profile",
            "ruined",
        }

    def test_same_seed_same_episode(self, panel, config):
        first = run_loop(panel, config, seed=3)
        second = run_loop(panel, config, seed=3)
        assert first.equity.values == second.equity.values
        assert first.memory.to_ndjson() == second.memory.to_ndjson()
        assert first.trades.equals(second.trades)

    def test_memory_journal(self, panel, config, tmp_path):
        journal = tmp_path / "memory.ndjson"
        streamed = run_loop(panel, config, seed=3, memory_journal=journal)
        held = run_loop(panel, config, seed=3)
        assert streamed.memory.journal == journal
        assert journal.read_text() == held.memory.to_ndjson()
        assert len(streamed.memory) == len(held.memory)
        assert streamed.memory.recent() == held.memory.recent()

    def test_first_days_do_not_trade(self, panel, config):
        result = run_loop(panel, config)
        assert result.equity.values[1] == 1e6
        first = [event for event in result.memory if event.day == panel.days[1]]
        assert [event.meta for event in first] == [MetaTag.EMPTY_ENSEMBLE_SKIPPED]

    def test_miner_cadence(self, panel, config):
        result = run_loop(panel, config)
        mined_on = {e.day for e in result.memory.by_agent("miner")}
        assert mined_on <= {panel.days[31], panel.days[61]}
        for snapshot in result.snapshots:
            assert set(snapshot.factor_ids) <= {r.factor_id for r in result.library}

    def test_does_not_mutate_the_given_library(self, panel, config):
        library = classical_library(panel)
        before = [(r.factor_id, r.status, len(r.history)) for r in library]
        run_loop(panel, config, library=library)
        assert [(r.factor_id, r.status, len(r.history)) for r in library] == before

    def test_no_miner(self, panel, config):
        result = run_loop(panel, config, ablation="no-miner")
        assert result.ablation is Ablation.NO_MINER
        assert not result.memory.by_agent("miner")
        assert [r.factor_id for r in result.library] == [
            r.factor_id for r in classical_library(panel)
        ]

    def test_no_screener(self, panel, config):
        result = run_loop(
            panel,
            config.replace(miner=MinerConfig(cadence=1000)),
            ablation=Ablation.NO_SCREENER,
            library=classical_library(panel),
        )
        ensembles = result.memory.by_agent("screener")
        assert ensembles
        for event in ensembles:
            payload = event.payload
            assert "gaps" not in payload
            assert [e["weight"] for e in payload["entries"]] == [0.5, 0.5]

    def test_no_screener_directions_stop_before_the_window(self, make_panel, config):
        # Flat prices except the move into the first decision day, which
        # ranks against the close level.
        close = [[10.0, 20.0, 30.0, 40.0]] * 20 + [[11.0, 20.0, 29.0, 36.0]] * 10
        panel = make_panel(close)
        days = panel.days
        report = ValidationReport(
            "f0", days[0], days[18], 0.05, 0.1, 0.5, 0.6, 0.1, 1.0, (), days[19]
        )
        expr = FactorExpr("close")
        record = FactorRecord(
            factor_id_for(expr),
            str(expr),
            infer_category(expr),
            FactorStatus.EFFECTIVE,
            (report,),
        )
        result = run_loop(
            panel,
            config.replace(
                miner=MinerConfig(budget=0, cadence=1000),
                screener=ScreenerConfig(min_factors=1, k=1),
            ),
            DateRange(days[20], days[-1]),
            ablation="no-screener",
            library=FactorLibrary([record]),
        )
        ensembles = result.memory.by_agent("screener")
        assert ensembles
        assert {e.payload["entries"][0]["direction"] for e in ensembles} == {1}

    def test_no_trader(self, panel, config):
        result = run_loop(
            panel,
            config.replace(ablation="no-trader"),
            library=classical_library(panel),
        )
        kinds = {event.kind for event in result.memory.by_agent("trader")}
        assert "search" not in kinds
        executions = [
            e for e in result.memory.by_agent("trader") if e.kind == "execution"
        ]
        assert executions
        assert all(
            e.payload["theta"] == Theta(10, 0, 0.8, 1.0).to_dict() for e in executions
        )

    def test_empty_library_skips_trading(self, panel, config):
        config = config.replace(miner=MinerConfig(budget=0))
        result = run_loop(panel, config)
        assert set(result.equity.values) == {1e6}
        skipped = result.memory.count(MetaTag.EMPTY_ENSEMBLE_SKIPPED)
        assert skipped == len(panel.days) - 1
        assert result.trades.empty

    def test_single_day_range(self, panel, config):
        day = panel.days[0]
        result = run_loop(panel, config, DateRange(day, day))
        assert result.equity.days == (day,)
        assert result.equity.values == (1e6,)
        assert result.metrics()["ar"] is None


class TestRegimeSwitch:
    @pytest.fixture(scope="class")
    def market(self):
        spec = SyntheticSpec(seed=11, assets=20, days=500, strength=0.5)
        return spec, synthetic_panel(spec)

    def test_driver_is_deprecated_after_the_switch(self, market):
        spec, panel = market
        days = panel.days
        expr = FactorExpr(spec.factor_a)
        accepted = validate(expr, panel, DateRange(days[10], days[199]))
        assert accepted.mean_ic > 0.2
        driver = FactorRecord(
            factor_id_for(expr),
            str(expr),
            infer_category(expr),
            FactorStatus.EFFECTIVE,
            (accepted,),
        )
        config = RunConfig(
            initial_capital=1e6,
            miner=MinerConfig(budget=0, cadence=63),
            screener=ScreenerConfig(min_factors=1, k=2),
            trader=TraderConfig(n_long=(3, 5), lookback=20, min_lookback=5),
        )
        result = run_loop(
            panel,
            config,
            DateRange(days[200], days[-1]),
            library=FactorLibrary([driver]),
        )

        assert result.library.get(driver.factor_id).status is (
            FactorStatus.DEPRECATED
        )
        (deprecation,) = [
            e for e in result.memory.by_agent("miner") if e.meta is MetaTag.DEPRECATED
        ]
        assert deprecation.day > days[spec.switch]
        assert deprecation.payload["factor_id"] == driver.factor_id
        assert result.snapshots[0].factor_ids == (driver.factor_id,)
        assert result.snapshots[0].directions == (1,)
        assert driver.factor_id not in result.snapshots[-1].factor_ids
        assert result.snapshots[-1].day == deprecation.day


class TestTrials:
    @pytest.mark.parametrize(
        ("values", "expected"),
        [
            ([1.0, 2.0, 3.0, 4.0, 100.0], 3.0),
            ([5.0], 5.0),
            ([None, 2.0, math.nan, 2.0], 2.0),
            ([None], None),
            ([], None),
        ],
    )
    def test_iqr_trimmed_mean(self, values, expected):
        assert iqr_trimmed_mean(values) == expected

    def test_run_trials(self, panel, config):
        summary = run_trials(panel, config, trials=2, ablation="no-miner")
        assert [trial["seed"] for trial in summary.trials] == [0, 1]
        assert set(summary.to_dict()) == {"trials", "trimmed_mean"}
        assert set(summary.trimmed()) == {"ar", "sr", "mdd"}
        assert [s.day for s in summary.snapshots] == [panel.days[-1]] * 2

    def test_snapshot_dict(self, day):
        snapshot = LibrarySnapshot(day, (("f1", "close"),))
        assert snapshot.to_dict() == {
            "day": day.isoformat(),
            "factors": [{"factor_id": "f1", "expression": "close", "direction": 1}],
        }
        assert LibrarySnapshot.from_dict(snapshot.to_dict()) == snapshot

    def test_snapshot_directions(self, day):
        snapshot = LibrarySnapshot(day, (("f1", "close"), ("f2", "pb")), (1, -1))
        assert snapshot.oriented() == [("close", 1), ("pb", -1)]
        assert LibrarySnapshot.from_dict(snapshot.to_dict()) == snapshot
        legacy = {
            "day": day.isoformat(),
            "factors": [{"factor_id": "f1", "expression": "close"}],
        }
        assert LibrarySnapshot.from_dict(legacy).directions == (1,)
        with pytest.raises(ValueError):
            LibrarySnapshot(day, (("f1", "close"),), (1, -1))


class TestReference:
    def test_static_backtest(self, panel, config):
        library = classical_library(panel)
        days = panel.days
        curve, ensemble = run_reference(
            panel,
            config,
            library,
            DateRange(days[30], days[-1]),
            theta=Theta(3, 0, 0.8, 1.0),
        )
        assert not ensemble.empty
        assert curve.days == days[29:]
        assert curve.values[0] == 1e6

    def test_falls_back_to_equal_weights(self, panel, config):
        library = classical_library(panel)
        config = config.replace(screener=ScreenerConfig(min_factors=100))
        _, ensemble = run_reference(
            panel, config, library, DateRange(panel.days[30], panel.days[-1])
        )
        assert len(ensemble.entries) == len(library)


class TestAssessor:
    def test_short_panel_has_no_assessor(self, make_panel, config):
        assert build_assessor(make_panel([[1.0, 2.0]] * 10), config, 5) is None

    def test_assesses_after_the_trend_lookback(self, panel, config):
        assessor = build_assessor(panel, config, 1)
        assert assessor is not None
        assert assessor.assess(70).as_of == panel.days[70]

    def test_market_proxies(self, panel, config):
        rows = (65, 75, 89)
        assessor = build_assessor(panel, config, 40)
        assessments = [assessor.assess(row) for row in rows]
        proxies = market_proxies(panel, config, assessments)

        full = config.replace(regime=RegimeConfig(vol_reference="full"))
        reference = build_assessor(panel, full, 40)
        assert proxies == [reference.proxies(row) for row in rows]
        for (trend, vol, corr), assessment in zip(proxies, assessments):
            assert trend == assessment.trend_value
            assert corr == assessment.corr_value
            assert 0.0 <= vol <= 1.0

    def test_market_proxies_need_history(self, make_panel, config):
        with pytest.raises(InsufficientHistory):
            market_proxies(make_panel([[1.0, 2.0]] * 10), config, [])
