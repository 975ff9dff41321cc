# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

"""
The daily closed loop: Miner on its cadence, then Screener, then Trader,
then settlement, for every trading day of a date range.
"""

from __future__ import annotations

import dataclasses
import datetime
import logging
import os
from typing import Any, Iterable, Sequence

import numpy as np
import pandas as pd

from .agents import ExternalPolicy, Miner, Screener, SignalCache, Trader
from .config import Ablation, PolicyBackend, RunConfig
from .exchange import Exchange, MarketProfile, NonPositiveNav, get_profile
from .expressions import classical_set
from .factors import (
    FactorLibrary,
    FactorRecord,
    FactorStatus,
    NoValidDays,
    factor_id_for,
    ic_series,
    infer_category,
)
from .memory import MemoryStore, MetaTag
from .metrics import EquityCurve, metrics_report
from .panel import DateRange, PricePanel
from .regime import (
    InsufficientHistory,
    RegimeAssessment,
    RegimeAssessor,
    vol_quantiles,
)
from .strategy import Ensemble, MarkBook, Theta, backtest

__all__ = [
    "EpisodeResult",
    "LibrarySnapshot",
    "TrialSummary",
    "build_assessor",
    "classical_library",
    "iqr_trimmed_mean",
    "market_proxies",
    "run_loop",
    "run_reference",
    "run_trials",
]

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class LibrarySnapshot:
    day: datetime.date
    factors: tuple[tuple[str, str], ...]
    directions: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.directions:
            object.__setattr__(self, "directions", (1,) * len(self.factors))
        elif len(self.directions) != len(self.factors):
            raise ValueError(
                f"{len(self.factors)} factors but {len(self.directions)} directions"
            )

    @classmethod
    def of(
        cls, day: datetime.date, records: Iterable[FactorRecord]
    ) -> LibrarySnapshot:
        records = list(records)
        return cls(
            day,
            tuple((r.factor_id, r.expression) for r in records),
            tuple(r.direction for r in records),
        )

    @property
    def factor_ids(self) -> tuple[str, ...]:
        return tuple(factor_id for factor_id, _ in self.factors)

    def oriented(self) -> list[tuple[str, int]]:
        """Each expression with the sign it was accepted with."""
        return [
            (expression, direction)
            for (_, expression), direction in zip(self.factors, self.directions)
        ]

    def to_dict(self) -> dict[str, Any]:
        return {
            "day": self.day.isoformat(),
            "factors": [
                {"factor_id": factor_id, "expression": expression, "direction": sign}
                for (factor_id, expression), sign in zip(self.factors, self.directions)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> LibrarySnapshot:
        return cls(
            datetime.date.fromisoformat(data["day"]),
            tuple((f["factor_id"], f["expression"]) for f in data["factors"]),
            tuple(int(f.get("direction", 1)) for f in data["factors"]),
        )


@dataclasses.dataclass
class EpisodeResult:
    equity: EquityCurve
    trades: pd.DataFrame
    memory: MemoryStore
    assessments: list[RegimeAssessment]
    net_positions: list[tuple[datetime.date, float | None]]
    snapshots: list[LibrarySnapshot]
    accounts: list[dict[str, Any]]
    library: FactorLibrary
    ablation: Ablation = Ablation.NONE
    seed: int = 0

    def metrics(self) -> dict[str, Any]:
        return metrics_report(self.equity)


def classical_library(panel: PricePanel) -> FactorLibrary:
    """The built-in classical set as effective records, minus the factors
    whose fields the panel lacks."""
    library = FactorLibrary()
    for expr in classical_set():
        missing = sorted(name for name in expr.fields if not panel.has_field(name))
        if missing:
            logger.warning(
                "Skipping classical factor '%s': panel has no %s",
                expr,
                ", ".join(missing),
            )
            continue
        factor_id = factor_id_for(expr)
        if factor_id in library:
            continue
        library.add(
            FactorRecord(
                factor_id, str(expr), infer_category(expr), FactorStatus.EFFECTIVE
            )
        )
    return library


def _reference_rows(panel: PricePanel, config: RunConfig, start_row: int) -> slice:
    train = config.splits.range("train")
    if train is not None:
        rows = panel.calendar.span(train.start, train.end)
        if rows.stop - rows.start > 1:
            return rows
    return slice(0, start_row)


def build_assessor(
    panel: PricePanel, config: RunConfig, start_row: int
) -> RegimeAssessor | None:
    """A regime assessor for ``panel`` with volatility quantiles taken from
    the training window (or the whole panel when so configured)."""
    index_close = panel.market_index()["close"].to_numpy()
    dpy = panel.calendar.days_per_year
    window = config.regime.vol_window
    if config.regime.vol_reference == "full":
        reference = index_close
    else:
        rows = _reference_rows(panel, config, start_row)
        reference = index_close[rows]
    try:
        quantiles = vol_quantiles(reference, dpy, window)
    except InsufficientHistory:
        logger.warning(
            "Volatility reference window is too short; falling back to the "
            "whole panel (look-ahead)"
        )
        try:
            quantiles = vol_quantiles(index_close, dpy, window)
        except InsufficientHistory:
            return None
    close = panel.close
    returns = np.full(close.shape, np.nan)
    with np.errstate(invalid="ignore", divide="ignore"):
        returns[1:] = close[1:] / close[:-1] - 1.0
    return RegimeAssessor(
        index_close,
        returns,
        panel.days,
        dpy,
        quantiles=quantiles,
        config=config.regime,
    )


def market_proxies(
    panel: PricePanel,
    config: RunConfig,
    assessments: Sequence[RegimeAssessment],
) -> list[tuple[float, float, float]]:
    """The (trend, vol, corr) market proxies as of each assessment's day.

    Proxies use the same trailing windows as the assessor, but volatility is
    scaled by the 5th and 95th percentiles of the whole panel, whichever
    reference the run itself used.
    """
    full = config.replace(
        regime=dataclasses.replace(config.regime, vol_reference="full")
    )
    assessor = build_assessor(panel, full, len(panel.days))
    if assessor is None:
        raise InsufficientHistory("The panel is too short for volatility proxies")
    return [
        assessor.proxies(panel.calendar.index(assessment.as_of))
        for assessment in assessments
    ]


def _policy(config: RunConfig) -> ExternalPolicy | None:
    if config.policy.mode is not PolicyBackend.EXTERNAL:
        return None
    return ExternalPolicy(config.policy.command, config.policy.timeout)


def _training_direction(
    signal_values: np.ndarray, fwd: np.ndarray, rows: slice, rank: bool
) -> int:
    try:
        mean = float(ic_series(signal_values[rows], fwd[rows], rank=rank).mean())
    except NoValidDays:
        return 1
    return -1 if mean < 0 else 1


def _random_ensemble(
    library: FactorLibrary,
    cache: SignalCache,
    rng: np.random.Generator,
    k: int,
    directions: dict[str, int],
    train_rows: slice,
    rank: bool,
    regime: RegimeAssessment | None,
) -> Ensemble:
    effective = library.effective()
    if not effective:
        return Ensemble(regime=regime)
    size = min(k, len(effective))
    picks = sorted(int(i) for i in rng.choice(len(effective), size=size, replace=False))
    fwd = cache.panel.forward_return(1)
    chosen: dict[str, int] = {}
    for index in picks:
        record = effective[index]
        if record.factor_id not in directions:
            values = cache.get(record).values
            directions[record.factor_id] = _training_direction(
                values, fwd, train_rows, rank
            )
        chosen[record.factor_id] = directions[record.factor_id]
    return Ensemble.equal_weight(chosen, regime)


def _closes(panel: PricePanel, row: int) -> dict[str, float]:
    return {
        asset: float(close)
        for asset, close in zip(panel.assets, panel.close[row])
        if np.isfinite(close)
    }


def run_loop(
    panel: PricePanel,
    config: RunConfig,
    date_range: DateRange | None = None,
    *,
    ablation: Ablation | str | None = None,
    library: FactorLibrary | None = None,
    seed: int | None = None,
    memory_journal: str | os.PathLike[str] | None = None,
) -> EpisodeResult:
    """Run the three agents day by day over ``date_range``.

    With ``memory_journal`` the full event log streams to that file and only
    the recent tail of it stays in memory.
    """
    mode = Ablation.parse(ablation) if ablation is not None else config.ablation_mode
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    profile = get_profile(config.market)
    policy = _policy(config)
    memory = MemoryStore(journal=memory_journal)

    if date_range is None:
        date_range = config.splits.range("backtest") or DateRange(
            panel.days[0], panel.days[-1]
        )
    rows = panel.calendar.span(date_range.start, date_range.end)
    # Row 0 has no prior close to decide on; it only anchors V_0.
    first = max(rows.start, 1)

    if mode is Ablation.NO_MINER:
        library = classical_library(panel)
    else:
        library = library.copy() if library is not None else FactorLibrary()

    exchange = Exchange(profile, config.initial_capital)
    if first >= rows.stop:
        logger.warning("No trading days to simulate in %s", date_range)
        anchor = panel.days[first - 1] if rows.stop > rows.start else date_range.start
        equity = EquityCurve.for_profile([anchor], [config.initial_capital], profile)
        return EpisodeResult(
            equity, exchange.trade_frame(), memory, [], [], [], [], library, mode, seed
        )

    marks = MarkBook()
    marks.update(panel.assets, panel.close[first - 1])
    cache = SignalCache(panel)
    assessor = build_assessor(panel, config, first)
    miner = Miner(config.miner, config.acceptance, rng=rng, policy=policy)
    screener = Screener(config.screener, acceptance=config.acceptance, policy=policy)
    trader = Trader(
        config.trader, profile, policy=policy, search=mode is not Ablation.NO_TRADER
    )
    # Forward returns on row r read close r + 1, and close first - 1 is the
    # last one known before the first decision.
    reference = _reference_rows(panel, config, first)
    stop = max(reference.start, min(reference.stop, first - 1))
    train_rows = slice(reference.start, stop)
    directions: dict[str, int] = {}

    days = [panel.days[first - 1]]
    values = [float(config.initial_capital)]
    assessments: list[RegimeAssessment] = []
    net_positions: list[tuple[datetime.date, float | None]] = []
    accounts: list[dict[str, Any]] = []
    snapshots: list[LibrarySnapshot] = []

    def snapshot(day: datetime.date) -> None:
        current = LibrarySnapshot.of(day, library.effective())
        if not snapshots or snapshots[-1].oriented() != current.oriented():
            snapshots.append(current)

    snapshot(panel.days[first])
    for row in range(first, rows.stop):
        day = panel.days[row]
        exchange.open_day(day)
        if mode is not Ablation.NO_MINER and (row - first) % config.miner.cadence == 0:
            if row >= 2:
                miner.cycle(library, panel.head(row), memory, day)
                snapshot(day)

        regime = None
        if assessor is not None:
            try:
                regime = assessor.assess(row - 1)
            except InsufficientHistory as e:
                logger.debug("No regime on %s: %s", day, e)
        if regime is not None:
            assessments.append(regime)

        if row < 2:
            ensemble = Ensemble(regime=regime)
        elif mode is Ablation.NO_SCREENER:
            ensemble = _random_ensemble(
                library,
                cache,
                rng,
                config.screener.k,
                directions,
                train_rows,
                config.acceptance.rank_ic,
                regime,
            )
            if ensemble.empty:
                memory.append(
                    day, "screener", "ensemble", {}, MetaTag.INSUFFICIENT_FACTORS
                )
            else:
                memory.append(day, "screener", "ensemble", ensemble.to_dict())
        else:
            ensemble = screener.cycle(library, cache, row, regime, memory)

        signals = cache.signals([library.get(i) for i in ensemble.factor_ids])
        result = trader.cycle(ensemble, panel, signals, exchange, memory, row, marks)

        days.append(day)
        values.append(result.nav)
        try:
            rate: float | None = exchange.net_position_rate(marks.prices)
        except NonPositiveNav:
            rate = None
        net_positions.append((day, rate))
        accounts.append(exchange.snapshot(marks.prices))
        logger.debug("%s NAV %.2f", day, result.nav)

    equity = EquityCurve.for_profile(days, values, profile)
    return EpisodeResult(
        equity,
        exchange.trade_frame(),
        memory,
        assessments,
        net_positions,
        snapshots,
        accounts,
        library,
        mode,
        seed,
    )


# --------------------------------------------------------------------------------------
# Multi-trial runs
# --------------------------------------------------------------------------------------
def iqr_trimmed_mean(values: Sequence[float | None]) -> float | None:
    """Mean of the values lying within the first and third quartiles."""
    finite = np.array([v for v in values if v is not None], dtype=np.float64)
    finite = finite[np.isfinite(finite)]
    if finite.size == 0:
        return None
    q1, q3 = np.percentile(finite, [25, 75])
    kept = finite[(finite >= q1) & (finite <= q3)]
    return float(kept.mean()) if kept.size else float(finite.mean())


@dataclasses.dataclass
class TrialSummary:
    trials: list[dict[str, Any]]
    snapshots: list[LibrarySnapshot]

    def trimmed(self) -> dict[str, float | None]:
        return {
            key: iqr_trimmed_mean([trial[key] for trial in self.trials])
            for key in ("ar", "sr", "mdd")
        }

    def to_dict(self) -> dict[str, Any]:
        return {"trials": self.trials, "trimmed_mean": self.trimmed()}


def run_trials(
    panel: PricePanel,
    config: RunConfig,
    date_range: DateRange | None = None,
    *,
    trials: int = 1,
    ablation: Ablation | str | None = None,
    library: FactorLibrary | None = None,
) -> TrialSummary:
    """Repeat :func:`run_loop` with seeds ``seed, seed + 1, ...``."""
    results = []
    finals = []
    for offset in range(trials):
        seed = config.seed + offset
        episode = run_loop(
            panel, config, date_range, ablation=ablation, library=library, seed=seed
        )
        report = episode.metrics()
        report["seed"] = seed
        results.append(report)
        last_day = episode.equity.days[-1] if episode.equity.days else panel.days[-1]
        finals.append(LibrarySnapshot.of(last_day, episode.library.effective()))
    return TrialSummary(results, finals)


# --------------------------------------------------------------------------------------
# Static reference backtest
# --------------------------------------------------------------------------------------
def run_reference(
    panel: PricePanel,
    config: RunConfig,
    library: FactorLibrary,
    date_range: DateRange,
    *,
    theta: Theta | None = None,
    target_log: list[dict[str, Any]] | None = None,
) -> tuple[EquityCurve, Ensemble]:
    """Screen once at the start of ``date_range`` and hold that ensemble and
    Theta for the whole range."""
    profile: MarketProfile = get_profile(config.market)
    rows = panel.calendar.span(date_range.start, date_range.end)
    start = max(rows.start, 2)
    cache = SignalCache(panel)
    assessor = build_assessor(panel, config, start)
    regime = None
    if assessor is not None:
        try:
            regime = assessor.assess(start - 1)
        except InsufficientHistory:
            regime = None
    screener = Screener(config.screener, acceptance=config.acceptance)
    ensemble = screener.cycle(library, cache, start, regime, MemoryStore())
    if ensemble.empty:
        effective = library.effective()
        ensemble = Ensemble.equal_weight(
            {r.factor_id: 1 for r in effective}, regime
        )
    if theta is None:
        theta = Trader(config.trader, profile).fixed_theta(regime)
    signals = cache.signals([library.get(i) for i in ensemble.factor_ids])
    curve = backtest(
        panel,
        signals,
        ensemble,
        theta,
        profile,
        range(start, rows.stop),
        initial_capital=config.initial_capital,
        target_log=target_log,
    )
    return curve, ensemble
