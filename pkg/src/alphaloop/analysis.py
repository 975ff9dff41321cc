# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

"""
Post-hoc analyses over run artifacts: alpha decay, regime coherence,
exposure against volatility, library diversity and trading friction.
"""

from __future__ import annotations

import dataclasses
import datetime
import enum
import logging
import math
import os
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, Union

import numpy as np
import pandas as pd
from scipy import stats

from ._fileio import atomic_write_json, atomic_write_text
from .expressions import (
    FactorExpr,
    TooFewFactors,
    evaluate,
    phi_inter,
    phi_intra,
)
from .factors import NoValidDays, ic_series
from .panel import PricePanel
from .regime import InsufficientHistory, RegimeAssessment

__all__ = [
    "CoherenceMatrix",
    "DecayMode",
    "DecayRow",
    "DiversityReport",
    "EmptyCandidateSet",
    "ExposureFit",
    "ExposureSeries",
    "FrictionReport",
    "LengthMismatch",
    "MissingNav",
    "alpha_decay_report",
    "coherence_matrices",
    "diversity_report",
    "exposure_volatility",
    "friction_report",
    "period_slices",
    "write_coherence",
    "write_decay",
    "write_friction",
]

logger = logging.getLogger(__name__)

PERIOD_LENGTH = 126
EXPOSURE_STRIDE = 10
TYPICAL_SLIPPAGE = 0.002
WORST_SLIPPAGE = 0.01

FactorLike = Union[FactorExpr, str]
SnapshotEntry = Union[FactorLike, tuple[FactorLike, int]]


class EmptyCandidateSet(ValueError):
    """
    An alpha decay analysis was asked to rank an empty set of factors.
    """


class LengthMismatch(ValueError):
    """
    Paired series do not line up (different lengths or too few entries).
    """


class MissingNav(ValueError):
    """
    A trading day in the trade log has no prior-day NAV to normalize by.
    """


def _expr(factor: FactorLike) -> FactorExpr:
    return factor if isinstance(factor, FactorExpr) else FactorExpr(factor)


# --------------------------------------------------------------------------------------
# Alpha decay
# --------------------------------------------------------------------------------------
class DecayMode(enum.Enum):
    GLOBAL_TOPK = "global_topk"
    PERIODIC_TOPK = "periodic_topk"
    ADAPTIVE_LIBRARY = "adaptive_library"

    @classmethod
    def parse(cls, value: str | DecayMode) -> DecayMode:
        if isinstance(value, DecayMode):
            return value
        return cls(value.strip().lower().replace("-", "_"))


@dataclasses.dataclass(frozen=True)
class DecayRow:
    period: int
    start: datetime.date
    end: datetime.date
    mode: DecayMode
    mean_ic: float | None
    max_ic: float | None
    min_ic: float | None
    factors: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "period": self.period,
            "mode": self.mode.value,
            "mean_ic": self.mean_ic,
            "max_ic": self.max_ic,
            "min_ic": self.min_ic,
        }


def period_slices(
    n_rows: int, start: int = 0, length: int = PERIOD_LENGTH
) -> list[slice]:
    """Consecutive ``length``-row blocks from ``start``; a trailing partial
    block is kept when it has at least two rows."""
    if length < 1:
        raise ValueError(f"Period length must be positive, got {length}")
    periods = []
    for first in range(start, n_rows, length):
        stop = min(first + length, n_rows)
        if stop - first >= 2:
            periods.append(slice(first, stop))
    return periods


class _IcTable:
    """Per-factor mean IC over row windows, evaluated lazily."""

    def __init__(self, panel: PricePanel, *, rank: bool) -> None:
        self.panel = panel
        self.rank = rank
        self.fwd = panel.forward_return(1)
        self._values: dict[str, np.ndarray] = {}

    def mean_ic(self, factor: FactorExpr, rows: slice) -> float | None:
        key = str(factor)
        values = self._values.get(key)
        if values is None:
            values = evaluate(factor, self.panel).values
            self._values[key] = values
        try:
            return float(
                ic_series(values[rows], self.fwd[rows], rank=self.rank).mean()
            )
        except NoValidDays:
            return None


def _top_k(
    table: _IcTable, candidates: Sequence[FactorExpr], rows: slice, k: int
) -> list[tuple[FactorExpr, int]]:
    """The ``k`` candidates with the largest ``|mean IC|`` on ``rows`` with
    the sign that orients each one."""
    scored = []
    for expr in candidates:
        ic = table.mean_ic(expr, rows)
        if ic is not None:
            scored.append((-abs(ic), str(expr), expr, -1 if ic < 0 else 1))
    scored.sort(key=lambda item: (item[0], item[1]))
    return [(expr, sign) for _, _, expr, sign in scored[:k]]


def _summary(
    table: _IcTable,
    chosen: Sequence[tuple[FactorExpr, int]],
    rows: slice,
    period: int,
    mode: DecayMode,
) -> DecayRow:
    ics = []
    for expr, sign in chosen:
        ic = table.mean_ic(expr, rows)
        if ic is not None:
            ics.append(sign * ic)
    days = table.panel.days
    if not ics:
        return DecayRow(
            period, days[rows.start], days[rows.stop - 1], mode, None, None, None
        )
    return DecayRow(
        period,
        days[rows.start],
        days[rows.stop - 1],
        mode,
        float(np.mean(ics)),
        float(max(ics)),
        float(min(ics)),
        tuple(str(expr) for expr, _ in chosen),
    )


def _oriented(entry: SnapshotEntry) -> tuple[FactorExpr, int]:
    if isinstance(entry, tuple):
        factor, direction = entry
        return _expr(factor), -1 if direction < 0 else 1
    return _expr(entry), 1


def _snapshot_at(
    snapshots: Sequence[tuple[datetime.date, Sequence[SnapshotEntry]]],
    day: datetime.date,
) -> Sequence[SnapshotEntry]:
    current: Sequence[SnapshotEntry] = snapshots[0][1]
    for when, factors in snapshots:
        if when > day:
            break
        current = factors
    return current


def alpha_decay_report(
    panel: PricePanel,
    candidates: Iterable[FactorLike],
    mode: DecayMode | str,
    k: int = 20,
    *,
    snapshots: Sequence[tuple[datetime.date, Sequence[SnapshotEntry]]] = (),
    start_row: int = 0,
    period_length: int = PERIOD_LENGTH,
    rank_ic: bool = False,
) -> list[DecayRow]:
    """Mean, max and min of per-factor mean IC for each period.

    ``GLOBAL_TOPK`` ranks the candidates once over every period together,
    ``PERIODIC_TOPK`` re-ranks inside each period, and ``ADAPTIVE_LIBRARY``
    uses the library snapshot in effect at each period's first day. Top-k
    factors are oriented by the sign of their mean IC on the window they
    were selected on. Snapshot factors keep the sign they were accepted with
    (a bare expression counts as positive), so a factor whose IC flips after
    acceptance reports a negative IC.
    """
    mode = DecayMode.parse(mode)
    pool = [_expr(c) for c in candidates]
    if mode is DecayMode.ADAPTIVE_LIBRARY:
        if not snapshots:
            raise EmptyCandidateSet("No library snapshots to track")
    elif not pool:
        raise EmptyCandidateSet("No candidate factors to rank")

    table = _IcTable(panel, rank=rank_ic)
    periods = period_slices(len(panel.days), start_row, period_length)
    report = []
    fixed: list[tuple[FactorExpr, int]] = []
    if mode is DecayMode.GLOBAL_TOPK and periods:
        horizon = slice(periods[0].start, periods[-1].stop)
        fixed = _top_k(table, pool, horizon, k)
    for number, rows in enumerate(periods, start=1):
        if mode is DecayMode.GLOBAL_TOPK:
            chosen = fixed
        elif mode is DecayMode.PERIODIC_TOPK:
            chosen = _top_k(table, pool, rows, k)
        else:
            chosen = [
                _oriented(entry)
                for entry in _snapshot_at(snapshots, panel.days[rows.start])
            ]
        report.append(_summary(table, chosen, rows, number, mode))
    return report


def write_decay(path: str | os.PathLike[str], rows: Iterable[DecayRow]) -> Path:
    frame = pd.DataFrame(
        [row.to_dict() for row in rows],
        columns=["period", "mode", "mean_ic", "max_ic", "min_ic"],
    )
    return atomic_write_text(path, frame.to_csv(index=False))


# --------------------------------------------------------------------------------------
# Regime coherence
# --------------------------------------------------------------------------------------
DIMENSIONS = ("trend", "vol", "corr")


@dataclasses.dataclass(frozen=True)
class CoherenceMatrix:
    dimension: str
    raw: np.ndarray
    normalized: np.ndarray
    degenerate: bool = False

    def to_frame(self) -> pd.DataFrame:
        n = self.raw.shape[0]
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        return pd.DataFrame(
            {
                "i": i.ravel(),
                "j": j.ravel(),
                "raw": self.raw.ravel(),
                "normalized": self.normalized.ravel(),
            }
        )


def normalize(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    """Linear min-max over the whole matrix; a constant matrix maps to ones
    and is flagged degenerate."""
    low, high = float(raw.min()), float(raw.max())
    if not high > low:
        return np.ones_like(raw, dtype=np.float64), True
    return (raw - low) / (high - low), False


def coherence_matrices(
    assessments: Sequence[RegimeAssessment],
    proxies: Sequence[tuple[float, float, float]],
) -> dict[str, CoherenceMatrix]:
    """Similarity between each cycle's labelled regime and every cycle's
    market proxy, per dimension."""
    if len(assessments) != len(proxies):
        raise LengthMismatch(
            f"{len(assessments)} assessments but {len(proxies)} proxy triples"
        )
    if len(assessments) < 2:
        raise LengthMismatch("Coherence needs at least two cycles")
    semantic = np.array(
        [
            (a.trend_label.numeric, a.vol_label.numeric, a.corr_label.numeric)
            for a in assessments
        ],
        dtype=np.float64,
    )
    market = np.asarray(proxies, dtype=np.float64)
    matrices = {}
    for column, dimension in enumerate(DIMENSIONS):
        raw = 1.0 - np.abs(semantic[:, column, None] - market[None, :, column])
        normalized, degenerate = normalize(raw)
        if degenerate:
            logger.warning("Coherence matrix for %s is constant", dimension)
        matrices[dimension] = CoherenceMatrix(dimension, raw, normalized, degenerate)
    return matrices


def _heatmap_svg(matrix: CoherenceMatrix, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.8, 4.0), constrained_layout=True)
    image = ax.imshow(matrix.normalized, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_title(f"{matrix.dimension} coherence")
    ax.set_xlabel("market cycle")
    ax.set_ylabel("assessed cycle")
    fig.colorbar(image, ax=ax)
    tmp = path.with_name(f".{path.name}.tmp")
    fig.savefig(tmp, format="svg")
    plt.close(fig)
    os.replace(tmp, path)


def write_coherence(
    directory: str | os.PathLike[str],
    matrices: Mapping[str, CoherenceMatrix],
    *,
    svg: bool = True,
) -> list[Path]:
    out = Path(directory)
    written = []
    for dimension, matrix in matrices.items():
        csv_path = out / f"coherence_{dimension}.csv"
        written.append(
            atomic_write_text(csv_path, matrix.to_frame().to_csv(index=False))
        )
        if svg:
            svg_path = out / f"coherence_{dimension}.svg"
            _heatmap_svg(matrix, svg_path)
            written.append(svg_path)
    return written


# --------------------------------------------------------------------------------------
# Exposure against volatility
# --------------------------------------------------------------------------------------
@dataclasses.dataclass(frozen=True)
class ExposureSeries:
    days: tuple[datetime.date, ...]
    volatility: tuple[float, ...]
    exposure: tuple[float, ...]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "sample_day": [day.isoformat() for day in self.days],
                "V": self.volatility,
                "E": self.exposure,
            }
        )


@dataclasses.dataclass(frozen=True)
class ExposureFit:
    series: ExposureSeries
    slope: float | None
    pearson_r: float | None

    def to_dict(self) -> dict[str, Any]:
        return {"slope": self.slope, "pearson_r": self.pearson_r}


def exposure_volatility(
    index_bars: pd.DataFrame,
    net_position_rates: Mapping[datetime.date, float | None]
    | Sequence[tuple[datetime.date, float | None]],
    *,
    stride: int = EXPOSURE_STRIDE,
) -> ExposureFit:
    """Sample range-amplitude volatility and mean net position rate on
    non-overlapping ``stride``-day windows and regress exposure on volatility.

    ``index_bars`` is indexed by day with ``open``, ``high`` and ``low``
    columns.
    """
    rates = pd.Series(dict(net_position_rates), dtype=np.float64)
    common = [day for day in index_bars.index if day in rates.index]
    if len(common) < 2 * stride:
        raise InsufficientHistory(
            f"Exposure analysis needs {2 * stride} aligned days, got {len(common)}"
        )
    bars = index_bars.loc[common]
    high = bars["high"].to_numpy(dtype=np.float64)
    low = bars["low"].to_numpy(dtype=np.float64)
    opens = bars["open"].to_numpy(dtype=np.float64)
    rate = rates.loc[common].to_numpy(dtype=np.float64)

    days, vols, exposures = [], [], []
    for end in range(stride - 1, len(common), stride):
        window = slice(end - stride + 1, end + 1)
        if np.all(np.isnan(rate[window])):
            continue
        vols.append(float((high[window].max() - low[window].min()) / opens[window][0]))
        exposures.append(float(np.nanmean(rate[window])))
        days.append(common[end])
    series = ExposureSeries(tuple(days), tuple(vols), tuple(exposures))

    slope: float | None = None
    pearson: float | None = None
    if len(vols) >= 2 and max(vols) > min(vols):
        fit = stats.linregress(vols, exposures)
        slope, pearson = float(fit.slope), float(fit.rvalue)
    else:
        logger.warning("Volatility is constant across samples; no regression")
    return ExposureFit(series, slope, pearson)


# --------------------------------------------------------------------------------------
# Diversity
# --------------------------------------------------------------------------------------
@dataclasses.dataclass(frozen=True)
class DiversityReport:
    trials: tuple[dict[str, Any], ...]
    mean_intra: float | None
    mean_inter: float | None

    def to_dict(self) -> dict[str, Any]:
        return {
            "trials": list(self.trials),
            "mean_phi_intra": self.mean_intra,
            "mean_phi_inter": self.mean_inter,
        }


def _mean(values: Iterable[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    return math.fsum(present) / len(present) if present else None


def diversity_report(
    snapshots: Sequence[Iterable[FactorLike]],
    reference: Iterable[FactorLike],
) -> DiversityReport:
    """Within-library and library-to-reference distances per trial, plus
    their means across trials."""
    references = [_expr(r) for r in reference]
    trials = []
    for number, snapshot in enumerate(snapshots, start=1):
        library = [_expr(f) for f in snapshot]
        entry: dict[str, Any] = {"trial": number, "factors": len(library)}
        try:
            entry["phi_intra"] = phi_intra(library)
        except TooFewFactors as e:
            entry["phi_intra"] = None
            entry["error"] = str(e)
        try:
            entry["phi_inter"] = phi_inter(library, references)
        except TooFewFactors as e:
            entry["phi_inter"] = None
            entry["error"] = str(e)
        trials.append(entry)
    return DiversityReport(
        tuple(trials),
        _mean(t["phi_intra"] for t in trials),
        _mean(t["phi_inter"] for t in trials),
    )


# --------------------------------------------------------------------------------------
# Friction
# --------------------------------------------------------------------------------------
@dataclasses.dataclass(frozen=True)
class FrictionReport:
    frame: pd.DataFrame
    max_turnover: float
    exceeding: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_turnover": self.max_turnover,
            "max_slippage_bound": float(self.frame["slippage_bound"].max())
            if len(self.frame)
            else 0.0,
            "max_worst_case_bound": float(self.frame["worst_case_bound"].max())
            if len(self.frame)
            else 0.0,
            "days_above_one": list(self.exceeding),
        }


def friction_report(
    trade_log: pd.DataFrame,
    nav_series: Sequence[tuple[datetime.date | str, float]],
    *,
    typical_slippage: float = TYPICAL_SLIPPAGE,
    worst_slippage: float = WORST_SLIPPAGE,
) -> FrictionReport:
    """Daily turnover ``sum |fill value| / NAV(t-1)`` and the slippage
    standard-deviation bound ``slippage * turnover / sqrt(fills)``.

    ``nav_series`` is the equity curve, ``(day, NAV)`` from the day before
    the first trading day onwards.
    """
    navs = [
        (day if isinstance(day, str) else day.isoformat(), float(value))
        for day, value in nav_series
    ]
    prior = {day: navs[i - 1][1] for i, (day, _) in enumerate(navs) if i > 0}

    fills = trade_log[trade_log["status"] == "FILLED"]
    traded: dict[str, tuple[float, int]] = {}
    for day, group in fills.groupby("day", sort=True):
        value = (group["qty"].abs() * group["price"].astype(np.float64)).sum()
        traded[str(day)] = (float(value), len(group))
    for day in traded:
        if day not in prior:
            raise MissingNav(f"No prior-day NAV for trades on {day}")

    rows = []
    for day, before in prior.items():
        value, count = traded.get(day, (0.0, 0))
        if value and not before > 0:
            raise MissingNav(f"Prior-day NAV for {day} is not positive ({before})")
        turnover = value / before if value else 0.0
        root = math.sqrt(count) if count else 0.0
        rows.append(
            {
                "day": day,
                "turnover": turnover,
                "n_trades": count,
                "slippage_bound": typical_slippage * turnover / root if count else 0.0,
                "worst_case_bound": worst_slippage * turnover / root if count else 0.0,
            }
        )
    frame = pd.DataFrame(
        rows,
        columns=["day", "turnover", "n_trades", "slippage_bound", "worst_case_bound"],
    )
    exceeding = tuple(frame.loc[frame["turnover"] > 1.0, "day"])
    for day in exceeding:
        logger.warning("Turnover on %s exceeds one full book", day)
    max_turnover = float(frame["turnover"].max()) if len(frame) else 0.0
    return FrictionReport(frame, max_turnover, exceeding)


def write_friction(
    directory: str | os.PathLike[str], report: FrictionReport
) -> list[Path]:
    out = Path(directory)
    return [
        atomic_write_text(
            out / "friction.csv",
            report.frame[["day", "turnover", "n_trades", "slippage_bound"]].to_csv(
                index=False
            ),
        ),
        atomic_write_json(out / "friction.json", report.to_dict()),
    ]
