# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

"""
The three agents of the loop and their deterministic default policies.

* :class:`Miner` proposes factor expressions, validates them and maintains
  the library.
* :class:`Screener` picks a diversified, regime-aware ensemble.
* :class:`Trader` searches strategy parameters on a trailing backtest and
  trades the live exchange.

Any agent can defer to an :class:`ExternalPolicy`, a command that answers
one JSON request on stdin with one JSON response on stdout. Malformed or
failed responses fall back to the deterministic policy.
"""

from __future__ import annotations

import bisect
import concurrent.futures
import dataclasses
import datetime
import itertools
import json
import logging
import math
import shlex
import subprocess
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from .config import AcceptanceConfig, MinerConfig, ScreenerConfig, TraderConfig
from .exchange import Exchange, MarketProfile, Order
from .expressions import (
    EmptyCrossSection,
    FactorExpr,
    FactorSignal,
    InvalidExpression,
    canonicalize,
    evaluate,
)
from .factors import (
    FactorCategory,
    FactorLibrary,
    FactorRecord,
    FactorStatus,
    NoValidDays,
    ValidationReport,
    accept,
    factor_id_for,
    ic_series,
    infer_category,
    retain,
    validate,
)
from .memory import MemoryStore, MetaTag
from .metrics import (
    CurveTooShort,
    EquityCurve,
    ZeroVolatility,
    max_drawdown,
    sharpe,
)
from .panel import (
    DateOutOfRange,
    DateRange,
    HorizonTooLarge,
    PricePanel,
    UnknownField,
)
from .regime import CorrLabel, RegimeAssessment, TrendLabel, VolLabel
from .strategy import (
    Ensemble,
    EnsembleEntry,
    InvalidTheta,
    MarkBook,
    Theta,
    TransformHint,
    backtest,
    trade_day,
)

__all__ = [
    "ExternalPolicy",
    "GeneratorExhausted",
    "Miner",
    "MinerResult",
    "Screener",
    "SignalCache",
    "Trader",
    "TraderResult",
    "regime_multiplier",
    "template_candidates",
]

logger = logging.getLogger(__name__)

MINER = "miner"
SCREENER = "screener"
TRADER = "trader"

# Errors that mark a candidate as unusable rather than stopping the cycle.
_CANDIDATE_ERRORS = (
    InvalidExpression,
    EmptyCrossSection,
    NoValidDays,
    HorizonTooLarge,
    UnknownField,
    DateOutOfRange,
)


class GeneratorExhausted(ValueError):
    """
    The candidate generator ran dry before the cycle's budget was spent.
    """


class ExternalPolicy:
    """A decision process behind a command line.

    The command receives ``{"agent": ..., "inputs": ...}`` as one JSON
    document on stdin and must print one JSON object.
    """

    def __init__(
        self,
        command: str,
        timeout: float = 30.0,
        *,
        runner: Callable[..., subprocess.CompletedProcess[str]] = subprocess.run,
    ) -> None:
        self.argv = shlex.split(command)
        self.timeout = timeout
        self._runner = runner

    def request(self, agent: str, inputs: Mapping[str, Any]) -> dict[str, Any] | None:
        message = json.dumps({"agent": agent, "inputs": inputs}, default=str)
        try:
            proc = self._runner(
                self.argv,
                input=message,
                capture_output=True,
                text=True,
                timeout=self.timeout,
            )
        except (OSError, subprocess.SubprocessError) as e:
            logger.warning("External %s policy failed (%s); using default", agent, e)
            return None
        if proc.returncode != 0:
            logger.warning(
                "External %s policy exited with %d; using default",
                agent,
                proc.returncode,
            )
            return None
        try:
            response = json.loads(proc.stdout)
        except json.JSONDecodeError:
            logger.warning("External %s policy sent invalid JSON; using default", agent)
            return None
        if not isinstance(response, dict):
            logger.warning("External %s policy sent a non-object; using default", agent)
            return None
        return response


class SignalCache:
    """Factor signals over a whole panel, evaluated once per factor.

    Evaluation only looks back in time, so a row of a full-panel signal
    equals the same row evaluated on any prefix of the panel.
    """

    def __init__(self, panel: PricePanel) -> None:
        self.panel = panel
        self._signals: dict[str, FactorSignal] = {}

    def get(self, record: FactorRecord) -> FactorSignal:
        signal = self._signals.get(record.factor_id)
        if signal is None:
            signal = evaluate(record.expr, self.panel, expr_id=record.factor_id)
            self._signals[record.factor_id] = signal
        return signal

    def signals(self, records: Sequence[FactorRecord]) -> dict[str, FactorSignal]:
        return {record.factor_id: self.get(record) for record in records}


# --------------------------------------------------------------------------------------
# Miner
# --------------------------------------------------------------------------------------
def template_candidates(config: MinerConfig) -> list[str]:
    """Every ``transform(op(field, window))`` instantiation, in grid order."""
    return [
        f"{transform}({op}({field},{window}))"
        for transform, op, field, window in itertools.product(
            config.transforms, config.ops, config.fields, config.windows
        )
    ]


@dataclasses.dataclass
class MinerResult:
    accepted: list[FactorRecord] = dataclasses.field(default_factory=list)
    rejected: list[str] = dataclasses.field(default_factory=list)
    deprecated: list[str] = dataclasses.field(default_factory=list)
    retained: list[str] = dataclasses.field(default_factory=list)
    evaluated: int = 0
    exhausted: bool = False


def _report_payload(
    record_id: str, expression: str, report: ValidationReport
) -> dict[str, Any]:
    return {
        "factor_id": record_id,
        "expression": expression,
        "mean_ic": report.mean_ic,
        "icir": report.icir,
        "coverage": report.coverage,
        "turnover": report.turnover,
        "window": str(report.window),
    }


class Miner:
    def __init__(
        self,
        config: MinerConfig,
        acceptance: AcceptanceConfig,
        *,
        rng: np.random.Generator,
        policy: ExternalPolicy | None = None,
    ) -> None:
        self.config = config
        self.acceptance = acceptance
        self.policy = policy
        templates = template_candidates(config)
        order = rng.permutation(len(templates))
        self._templates = [templates[i] for i in order]

    def _proposals(self, library: FactorLibrary, memory: MemoryStore) -> Iterator[str]:
        if self.policy is not None:
            response = self.policy.request(
                MINER,
                {
                    "library": [r.expression for r in library.effective()],
                    "memory": memory.summary(),
                    "budget": self.config.budget,
                },
            )
            proposed = None if response is None else response.get("expressions")
            if isinstance(proposed, list) and all(isinstance(p, str) for p in proposed):
                yield from proposed
                return
            if response is not None:
                logger.warning("External miner response is malformed; using default")
        yield from self._templates

    def generate(
        self,
        library: FactorLibrary,
        panel: PricePanel,
        memory: MemoryStore,
        window: DateRange,
        day: datetime.date,
    ) -> MinerResult:
        """Draw, validate and accept candidates until ``max_new`` are accepted
        or ``budget`` candidates have been validated."""
        result = MinerResult()
        if self.config.budget <= 0 or self.config.max_new <= 0:
            return result
        known = {canonicalize(r.expr) for r in library.effective()}
        for text in self._proposals(library, memory):
            if result.evaluated >= self.config.budget:
                break
            if len(result.accepted) >= self.config.max_new:
                break
            try:
                expr = FactorExpr(text)
            except InvalidExpression as e:
                logger.debug("Skipping unparsable proposal %r: %s", text, e)
                continue
            normalized = str(expr)
            if memory.tried_canonical(expr) or canonicalize(expr) in known:
                continue
            factor_id = factor_id_for(expr)
            if factor_id in library:
                continue
            result.evaluated += 1
            try:
                report = validate(
                    expr,
                    panel,
                    window,
                    rank_ic=self.acceptance.rank_ic,
                    factor_id=factor_id,
                    validated_on=day,
                )
            except _CANDIDATE_ERRORS as e:
                memory.append(
                    day,
                    MINER,
                    "candidate",
                    {"factor_id": factor_id, "expression": normalized, "error": str(e)},
                    MetaTag.INEFFECTIVE,
                )
                result.rejected.append(factor_id)
                continue
            payload = _report_payload(factor_id, normalized, report)
            if accept(report, self.acceptance):
                record = FactorRecord(
                    factor_id,
                    normalized,
                    infer_category(expr),
                    FactorStatus.EFFECTIVE,
                    (report,),
                )
                library.add(record)
                known.add(canonicalize(expr))
                result.accepted.append(record)
                memory.append(day, MINER, "candidate", payload, MetaTag.EFFECTIVE)
                logger.debug("Accepted factor %s '%s'", factor_id, normalized)
            else:
                result.rejected.append(factor_id)
                memory.append(day, MINER, "candidate", payload, MetaTag.INEFFECTIVE)
        else:
            if (
                result.evaluated < self.config.budget
                and len(result.accepted) < self.config.max_new
            ):
                result.exhausted = True
                exc = GeneratorExhausted(
                    f"Generator ran out after {result.evaluated} candidates"
                )
                logger.warning("%s", exc)
                memory.append(
                    day, MINER, "generator_exhausted", {"evaluated": result.evaluated}
                )
        return result

    def maintain(
        self,
        library: FactorLibrary,
        panel: PricePanel,
        memory: MemoryStore,
        day: datetime.date,
        result: MinerResult | None = None,
    ) -> MinerResult:
        """Re-validate effective factors due for maintenance on ``panel``'s
        trailing window and deprecate the ones that decayed."""
        result = result or MinerResult()
        n_days = len(panel.days)
        start = panel.days[max(0, n_days - self.config.revalidation_window)]
        window = DateRange(start, panel.days[-1])
        for record in library.effective():
            last = record.last_validated
            if last is not None:
                elapsed = len(panel.days) - bisect.bisect_right(panel.days, last) + 1
                if elapsed < self.config.cadence:
                    continue
            try:
                report = validate(
                    record.expr,
                    panel,
                    window,
                    rank_ic=self.acceptance.rank_ic,
                    factor_id=record.factor_id,
                    validated_on=day,
                )
                if record.accepted_report is None:
                    # Seeded factors take their first report as the baseline.
                    status = FactorStatus.EFFECTIVE
                else:
                    status = retain(record, report, ratio=self.config.retention_ratio)
            except _CANDIDATE_ERRORS as e:
                logger.info("Deprecating %s: %s", record.factor_id, e)
                report = None
                status = FactorStatus.DEPRECATED
            if report is not None:
                library.update(record.with_report(report, status))
                payload = _report_payload(record.factor_id, record.expression, report)
            else:
                library.update(dataclasses.replace(record, status=status))
                payload = {
                    "factor_id": record.factor_id,
                    "expression": record.expression,
                }
            if status is FactorStatus.DEPRECATED:
                result.deprecated.append(record.factor_id)
                memory.append(day, MINER, "maintenance", payload, MetaTag.DEPRECATED)
            else:
                result.retained.append(record.factor_id)
                memory.append(day, MINER, "maintenance", payload, MetaTag.EFFECTIVE)
        return result

    def cycle(
        self,
        library: FactorLibrary,
        panel: PricePanel,
        memory: MemoryStore,
        day: datetime.date,
    ) -> MinerResult:
        """One mining pass on ``panel`` (the data visible on ``day``)."""
        n_days = len(panel.days)
        start = panel.days[max(0, n_days - self.config.mining_window)]
        result = self.generate(
            library, panel, memory, DateRange(start, panel.days[-1]), day
        )
        self.maintain(library, panel, memory, day, result)
        logger.info(
            "Miner on %s: %d accepted, %d rejected, %d deprecated",
            day,
            len(result.accepted),
            len(result.rejected),
            len(result.deprecated),
        )
        return result


# --------------------------------------------------------------------------------------
# Screener
# --------------------------------------------------------------------------------------
_TRENDING = {
    TrendLabel.STRONG_DOWNTREND,
    TrendLabel.DOWNTREND,
    TrendLabel.UPTREND,
    TrendLabel.STRONG_UPTREND,
}
_HIGH = {VolLabel.HIGH, VolLabel.VERY_HIGH, CorrLabel.HIGH, CorrLabel.VERY_HIGH}
_LOW = {VolLabel.LOW, VolLabel.VERY_LOW, CorrLabel.LOW, CorrLabel.VERY_LOW}


def regime_multiplier(
    category: FactorCategory,
    regime: RegimeAssessment | None,
    *,
    boost: float = 1.25,
    damp: float = 0.75,
) -> float:
    """How much the current regime favours a factor family."""
    if regime is None:
        return 1.0
    if category in (FactorCategory.MOMENTUM, FactorCategory.REVERSAL):
        trending = regime.trend_label in _TRENDING
        favoured = trending == (category is FactorCategory.MOMENTUM)
        return boost if favoured else damp
    if category is FactorCategory.VOLATILITY:
        label: VolLabel | CorrLabel = regime.vol_label
    elif category is FactorCategory.LIQUIDITY:
        label = regime.corr_label
    else:
        return 1.0
    if label in _HIGH:
        return boost
    if label in _LOW:
        return damp
    return 1.0


@dataclasses.dataclass(frozen=True)
class _Candidate:
    record: FactorRecord
    suitability: float
    direction: int
    mean_ic: float
    icir: float


def _signal_corr(a: np.ndarray, b: np.ndarray) -> float:
    both = np.isfinite(a) & np.isfinite(b)
    if both.sum() < 3:
        return 0.0
    x, y = a[both], b[both]
    if x.std() == 0 or y.std() == 0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


class Screener:
    def __init__(
        self,
        config: ScreenerConfig,
        *,
        acceptance: AcceptanceConfig | None = None,
        policy: ExternalPolicy | None = None,
    ) -> None:
        self.config = config
        self.acceptance = acceptance or AcceptanceConfig()
        self.policy = policy

    def _recent(
        self, signal: FactorSignal, fwd: np.ndarray, rows: slice
    ) -> tuple[float, float]:
        try:
            ics = ic_series(
                signal.values[rows], fwd[rows], rank=self.acceptance.rank_ic
            )
        except NoValidDays:
            return 0.0, 0.0
        mean = float(ics.mean())
        std = float(ics.std(ddof=1)) if len(ics) > 1 else 0.0
        return mean, (mean / std if std > 1e-12 else 0.0)

    def _external(
        self, response: dict[str, Any] | None, effective: Sequence[FactorRecord]
    ) -> tuple[EnsembleEntry, ...] | None:
        if response is None:
            return None
        known = {record.factor_id for record in effective}
        try:
            entries = tuple(
                EnsembleEntry(
                    str(item["factor_id"]),
                    float(item["weight"]),
                    int(item["direction"]),
                    None
                    if item.get("transform_hint") is None
                    else TransformHint(item["transform_hint"]),
                )
                for item in response["entries"]
            )
            Ensemble(entries)
        except (KeyError, TypeError, ValueError):
            entries = ()
        if not entries or any(entry.factor_id not in known for entry in entries):
            logger.warning("External screener response is malformed; using default")
            return None
        return entries

    def cycle(
        self,
        library: FactorLibrary,
        signals: SignalCache,
        row: int,
        regime: RegimeAssessment | None,
        memory: MemoryStore,
    ) -> Ensemble:
        """Pick today's ensemble for ``signals.panel.days[row]`` using data up
        to the previous close."""
        panel = signals.panel
        day = panel.days[row]
        effective = library.effective()
        if len(effective) < self.config.min_factors:
            memory.append(
                day,
                SCREENER,
                "ensemble",
                {"effective": len(effective), "required": self.config.min_factors},
                MetaTag.INSUFFICIENT_FACTORS,
            )
            return Ensemble(regime=regime)

        visible = panel.head(row)
        fwd = visible.forward_return(1) if row > 1 else np.full(visible.shape, np.nan)
        recent = slice(max(0, row - self.config.recent_window), row)

        entries = None
        if self.policy is not None:
            response = self.policy.request(
                SCREENER,
                {
                    "day": day.isoformat(),
                    "factors": [r.to_dict() for r in effective],
                    "regime": None if regime is None else regime.to_dict(),
                },
            )
            entries = self._external(response, effective)

        if entries is None:
            entries = self._default_entries(effective, signals, fwd, recent, regime)
        ensemble = Ensemble(entries, regime)

        selected = [library.get(entry.factor_id) for entry in entries]
        payload = ensemble.to_dict()
        payload["gaps"] = sorted(
            category.value
            for category in FactorCategory
            if category is not FactorCategory.OTHER
            and all(r.category is not category for r in effective)
        )
        payload["flags"] = self._flags(selected, signals, recent)
        memory.append(day, SCREENER, "ensemble", payload)
        logger.info("Screener on %s selected %s", day, ", ".join(ensemble.factor_ids))
        return ensemble

    def _default_entries(
        self,
        effective: Sequence[FactorRecord],
        signals: SignalCache,
        fwd: np.ndarray,
        recent: slice,
        regime: RegimeAssessment | None,
    ) -> tuple[EnsembleEntry, ...]:
        candidates = []
        for record in effective:
            signal = signals.get(record)
            mean_ic, icir = self._recent(signal, fwd, recent)
            multiplier = regime_multiplier(
                record.category,
                regime,
                boost=self.config.boost,
                damp=self.config.damp,
            )
            candidates.append(
                _Candidate(
                    record,
                    abs(icir) * multiplier,
                    -1 if mean_ic < 0 else 1,
                    mean_ic,
                    icir,
                )
            )
        candidates.sort(key=lambda c: (-c.suitability, c.record.factor_id))

        chosen: list[_Candidate] = []
        for candidate in candidates:
            if len(chosen) >= self.config.k:
                break
            values = signals.get(candidate.record).values[recent].ravel()
            crowded = any(
                abs(_signal_corr(values, signals.get(c.record).values[recent].ravel()))
                >= self.config.corr_threshold
                for c in chosen
            )
            if not crowded:
                chosen.append(candidate)

        total = sum(c.suitability for c in chosen)
        if total > 0:
            weights = [c.suitability / total for c in chosen]
        else:
            weights = [1.0 / len(chosen)] * len(chosen)
        return tuple(
            EnsembleEntry(c.record.factor_id, w, c.direction)
            for c, w in zip(chosen, weights)
        )

    def _flags(
        self, selected: Sequence[FactorRecord], signals: SignalCache, recent: slice
    ) -> list[dict[str, Any]]:
        flags = []
        for record in selected:
            report = record.history[-1] if record.history else None
            if report is not None and report.turnover > self.acceptance.turnover_max:
                flags.append(
                    {"factor_id": record.factor_id, "flag": "high_turnover"}
                )
        for a, b in itertools.combinations(selected, 2):
            rho = _signal_corr(
                signals.get(a).values[recent].ravel(),
                signals.get(b).values[recent].ravel(),
            )
            if abs(rho) >= self.config.corr_threshold:
                flags.append(
                    {
                        "factor_id": a.factor_id,
                        "other": b.factor_id,
                        "flag": "crowded",
                        "corr": rho,
                    }
                )
        return flags


# --------------------------------------------------------------------------------------
# Trader
# --------------------------------------------------------------------------------------
@dataclasses.dataclass
class TraderResult:
    theta: Theta | None
    orders: list[Order]
    realized_return: float
    nav: float
    skipped: bool = False
    searched: bool = False
    objective: float | None = None


def objective(curve: EquityCurve, *, lam: float) -> float:
    """J = SR + lambda * MDD, with an undefined Sharpe ratio counted as 0."""
    try:
        sr = sharpe(curve)
    except (ZeroVolatility, CurveTooShort):
        sr = 0.0
    return sr + lam * max_drawdown(curve)


class Trader:
    def __init__(
        self,
        config: TraderConfig,
        profile: MarketProfile,
        *,
        policy: ExternalPolicy | None = None,
        search: bool = True,
    ) -> None:
        self.config = config
        self.profile = profile
        self.policy = policy
        self.search_enabled = search
        self.theta: Theta | None = None
        self._last_search: int | None = None

    def exposure(self, regime: RegimeAssessment | None) -> tuple[float, float]:
        """(beta, gamma) after the regime overlay."""
        gamma = self.config.net_bias(self.profile.default_gamma)
        beta = self.config.beta
        if not self.profile.allow_short:
            gamma = 1.0
        if regime is not None:
            if regime.vol_label is VolLabel.VERY_HIGH:
                beta *= self.config.high_vol_beta_scale
            if self.config.bull_long_only and regime.trend_label in (
                TrendLabel.UPTREND,
                TrendLabel.STRONG_UPTREND,
            ):
                gamma = 1.0
        return min(1.0, max(beta, 1e-6)), gamma

    def fixed_theta(self, regime: RegimeAssessment | None = None) -> Theta:
        beta, gamma = self.exposure(regime)
        return Theta(10, 10 if gamma < 1 else 0, beta, gamma)

    def grid(self, universe_size: int, regime: RegimeAssessment | None) -> list[Theta]:
        beta, gamma = self.exposure(regime)
        shorts = [0] if gamma == 1.0 else [n for n in self.config.n_short if n > 0]
        grid = [
            Theta(n_long, n_short, beta, gamma)
            for n_long in self.config.n_long
            for n_short in shorts
            if n_long + n_short <= universe_size
        ]
        return sorted(set(grid))

    def _score(
        self,
        theta: Theta,
        panel: PricePanel,
        signals: Mapping[str, FactorSignal],
        ensemble: Ensemble,
        rows: range,
    ) -> float:
        curve = backtest(panel, signals, ensemble, theta, self.profile, rows)
        return objective(curve, lam=self.config.objective_lambda)

    def search(
        self,
        panel: PricePanel,
        signals: Mapping[str, FactorSignal],
        ensemble: Ensemble,
        row: int,
        grid: Sequence[Theta],
    ) -> list[tuple[float, Theta]]:
        """Score each candidate on the trailing lookback ending before ``row``.

        Results are sorted best first: highest J, then the smallest Theta.
        """
        rows = range(max(1, row - self.config.lookback), row)
        if self.config.workers > 1:
            with concurrent.futures.ThreadPoolExecutor(self.config.workers) as pool:
                scores = list(
                    pool.map(
                        lambda t: self._score(t, panel, signals, ensemble, rows), grid
                    )
                )
        else:
            scores = [self._score(t, panel, signals, ensemble, rows) for t in grid]
        return sorted(zip(scores, grid), key=lambda item: (-item[0], item[1]))

    def _external_theta(self, regime: RegimeAssessment | None) -> Theta | None:
        if self.policy is None:
            return None
        response = self.policy.request(
            TRADER,
            {
                "regime": None if regime is None else regime.to_dict(),
                "profile": self.profile.name,
                "current": None if self.theta is None else self.theta.to_dict(),
            },
        )
        if response is None:
            return None
        try:
            data = response["theta"]
            theta = Theta(
                int(data["n_long"]),
                int(data["n_short"]),
                float(data["beta"]),
                float(data["gamma"]),
            )
            theta.check_profile(self.profile)
        except (KeyError, TypeError, ValueError):
            logger.warning("External trader response is malformed; using default")
            return None
        return theta

    def choose(
        self,
        panel: PricePanel,
        signals: Mapping[str, FactorSignal],
        ensemble: Ensemble,
        row: int,
        memory: MemoryStore,
    ) -> tuple[Theta, bool, float | None]:
        """Today's Theta, whether a search ran, and the winning objective."""
        day = panel.days[row]
        regime = ensemble.regime
        external = self._external_theta(regime)
        if external is not None:
            self.theta = external
            return external, False, None
        if not self.search_enabled:
            self.theta = self.fixed_theta(regime)
            return self.theta, False, None

        lookback = row - max(1, row - self.config.lookback)
        due = (
            self._last_search is None
            or row - self._last_search >= self.config.search_interval
        )
        if lookback < self.config.min_lookback:
            self.theta = self.fixed_theta(regime)
            memory.append(
                day,
                TRADER,
                "warmup",
                {"theta": self.theta.to_dict(), "lookback": lookback},
            )
            return self.theta, False, None
        if not due and self.theta is not None:
            return self.theta, False, None

        eligible = panel.universe_mask()[row - 1] & np.isfinite(panel.close[row - 1])
        grid = self.grid(int(eligible.sum()), regime)
        if not grid:
            self.theta = self.fixed_theta(regime)
            logger.info("No Theta fits %d assets on %s", int(eligible.sum()), day)
            return self.theta, False, None

        ranked = self.search(panel, signals, ensemble, row, grid)
        self._last_search = row
        best_score, best = ranked[0]
        scores = {theta: score for score, theta in ranked}
        incumbent = None if self.theta is None else scores.get(self.theta)
        payload = {
            "candidate": best.to_dict(),
            "objective": best_score,
            "incumbent": None if self.theta is None else self.theta.to_dict(),
            "incumbent_objective": incumbent,
            "evaluated": len(ranked),
        }
        if incumbent is None or best_score > incumbent:
            self.theta = best
            memory.append(day, TRADER, "search", payload, MetaTag.IMPROVED)
        else:
            memory.append(day, TRADER, "search", payload, MetaTag.REJECTED)
        assert self.theta is not None
        return self.theta, True, best_score

    def cycle(
        self,
        ensemble: Ensemble,
        panel: PricePanel,
        signals: Mapping[str, FactorSignal],
        exchange: Exchange,
        memory: MemoryStore,
        row: int,
        marks: MarkBook,
    ) -> TraderResult:
        """Trade ``panel.days[row]`` on the live exchange and settle it."""
        day = panel.days[row]
        exchange.open_day(day)
        before = exchange.nav(marks.prices)

        theta: Theta | None = None
        orders: list[Order] = []
        searched = False
        score = None
        if ensemble.empty:
            memory.append(day, TRADER, "skip", {}, MetaTag.EMPTY_ENSEMBLE_SKIPPED)
        else:
            theta, searched, score = self.choose(panel, signals, ensemble, row, memory)
            try:
                theta.check_profile(self.profile)
            except InvalidTheta as e:
                logger.warning("Dropping Theta %s: %s", theta, e)
                theta = self.fixed_theta(None)
            orders = trade_day(exchange, panel, signals, ensemble, theta, row, marks)

        closes = panel.close[row]
        report = exchange.settle_day(
            day,
            {a: float(c) for a, c in zip(panel.assets, closes) if math.isfinite(c)},
        )
        marks.update(panel.assets, closes)
        after = exchange.nav(marks.prices)
        realized = after / before - 1.0 if before > 0 else 0.0
        if theta is not None:
            memory.append(
                day,
                TRADER,
                "execution",
                {
                    "theta": theta.to_dict(),
                    "orders": len(orders),
                    "fills": len(report.fills),
                    "margin_calls": len(report.margin_calls),
                    "nav": after,
                    "return": realized,
                },
                MetaTag.EXECUTED,
            )
        return TraderResult(
            theta=theta,
            orders=orders,
            realized_return=0.0 if ensemble.empty else realized,
            nav=after,
            skipped=ensemble.empty,
            searched=searched,
            objective=score,
        )
