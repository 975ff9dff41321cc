# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

"""
Factor validation (IC, ICIR, turnover, coverage, decay), acceptance and
retention rules, and the on-disk factor library (``factors/<id>.json``).
"""

from __future__ import annotations

import dataclasses
import datetime
import enum
import hashlib
import json
import logging
import os
import threading
import warnings
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from ._fileio import atomic_write_json
from ._parser import FieldRef, TimeSeries, Unary, walk
from .config import AcceptanceConfig
from .expressions import FactorExpr, FactorSignal, InvalidExpression, evaluate
from .panel import DateRange, PricePanel

__all__ = [
    "CorruptRecord",
    "DuplicateFactorId",
    "FactorCategory",
    "FactorLibrary",
    "FactorRecord",
    "FactorStatus",
    "NoValidDays",
    "ValidationReport",
    "accept",
    "factor_id_for",
    "ic_series",
    "infer_category",
    "load_library",
    "retain",
    "save_factor",
    "validate",
]

logger = logging.getLogger(__name__)

DECAY_HORIZONS = tuple(range(1, 11))

# IC standard deviations at or below this are treated as zero.
_DEGENERATE_STD = 1e-12

_library_lock = threading.Lock()


class NoValidDays(ValueError):
    """
    No day had three or more paired, non-constant values to correlate.
    """


class DuplicateFactorId(ValueError):
    """
    Two records in one library share a factor id.
    """


class CorruptRecord(ValueError):
    """
    A factor file does not match the record schema. ``errors`` lists every
    problem found in the file.
    """

    def __init__(self, message: str, errors: list[str] | None = None) -> None:
        super().__init__(message)
        self.errors = errors or [message]


class FactorStatus(enum.Enum):
    EFFECTIVE = "effective"
    INEFFECTIVE = "ineffective"
    DEPRECATED = "deprecated"


class FactorCategory(enum.Enum):
    MOMENTUM = "momentum"
    REVERSAL = "reversal"
    VALUE = "value"
    QUALITY = "quality"
    VOLATILITY = "volatility"
    LIQUIDITY = "liquidity"
    OTHER = "other"


def factor_id_for(expr: FactorExpr) -> str:
    return "f" + hashlib.sha1(str(expr).encode("utf-8")).hexdigest()[:10]


def infer_category(expr: FactorExpr) -> FactorCategory:
    """Guess a factor's family from the fields and operators it uses."""
    fields = expr.fields
    nodes = list(walk(expr.root))
    if fields & {"pe", "ps", "pb", "dyr"}:
        return FactorCategory.VALUE
    if any(isinstance(node, TimeSeries) and node.op == "ts_std" for node in nodes):
        return FactorCategory.VOLATILITY
    if "volume" in fields:
        return FactorCategory.LIQUIDITY
    if {"high", "low"} <= fields:
        return FactorCategory.VOLATILITY
    negated_change = any(
        isinstance(node, Unary)
        and node.op == "neg"
        and any(
            isinstance(inner, TimeSeries) and inner.op in ("ts_delta", "ts_sum")
            for inner in walk(node.operand)
        )
        for node in nodes
    )
    if negated_change:
        return FactorCategory.REVERSAL
    trend_ops = {"ts_delta", "ts_mean", "ts_rank", "ts_max", "ts_min", "ts_sum"}
    if any(isinstance(node, TimeSeries) and node.op in trend_ops for node in nodes):
        if any(isinstance(node, FieldRef) and node.name == "close" for node in nodes):
            return FactorCategory.MOMENTUM
    return FactorCategory.OTHER


# --------------------------------------------------------------------------------------
# Reports and records
# --------------------------------------------------------------------------------------
@dataclasses.dataclass(frozen=True)
class ValidationReport:
    factor_id: str
    window_start: datetime.date
    window_end: datetime.date
    mean_ic: float
    ic_std: float
    icir: float
    ic_hit_ratio: float
    turnover: float
    coverage: float
    decay: tuple[tuple[int, float | None], ...]
    validated_on: datetime.date

    @property
    def window(self) -> DateRange:
        return DateRange(self.window_start, self.window_end)

    @property
    def degenerate(self) -> bool:
        """True when the IC series has no spread, so ICIR is undefined."""
        return not self.ic_std > _DEGENERATE_STD

    def to_dict(self) -> dict[str, Any]:
        return {
            "window_start": self.window_start.isoformat(),
            "window_end": self.window_end.isoformat(),
            "mean_ic": self.mean_ic,
            "ic_std": self.ic_std,
            "icir": self.icir,
            "ic_hit_ratio": self.ic_hit_ratio,
            "turnover": self.turnover,
            "coverage": self.coverage,
            "decay": [[h, ic] for h, ic in self.decay],
            "validated_on": self.validated_on.isoformat(),
        }

    @classmethod
    def from_dict(cls, factor_id: str, data: Mapping[str, Any]) -> ValidationReport:
        decay = tuple(
            (int(h), None if ic is None else float(ic)) for h, ic in data["decay"]
        )
        return cls(
            factor_id=factor_id,
            window_start=datetime.date.fromisoformat(data["window_start"]),
            window_end=datetime.date.fromisoformat(data["window_end"]),
            mean_ic=float(data["mean_ic"]),
            ic_std=float(data["ic_std"]),
            icir=float(data["icir"]),
            ic_hit_ratio=float(data["ic_hit_ratio"]),
            turnover=float(data["turnover"]),
            coverage=float(data["coverage"]),
            decay=decay,
            validated_on=datetime.date.fromisoformat(data["validated_on"]),
        )


@dataclasses.dataclass(frozen=True)
class FactorRecord:
    factor_id: str
    expression: str
    category: FactorCategory
    status: FactorStatus
    history: tuple[ValidationReport, ...] = ()

    @property
    def expr(self) -> FactorExpr:
        return FactorExpr(self.expression)

    @property
    def accepted_report(self) -> ValidationReport | None:
        """The report the acceptance decision was made on."""
        return self.history[0] if self.history else None

    @property
    def direction(self) -> int:
        """The sign the factor was accepted with; 1 without a report."""
        report = self.accepted_report
        return -1 if report is not None and report.mean_ic < 0 else 1

    @property
    def last_validated(self) -> datetime.date | None:
        return self.history[-1].validated_on if self.history else None

    def with_report(
        self, report: ValidationReport, status: FactorStatus | None = None
    ) -> FactorRecord:
        return dataclasses.replace(
            self,
            history=(*self.history, report),
            status=self.status if status is None else status,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "factor_id": self.factor_id,
            "expression": self.expression,
            "category": self.category.value,
            "status": self.status.value,
            "history": [report.to_dict() for report in self.history],
        }


_RECORD_KEYS = {
    "factor_id": str,
    "expression": str,
    "category": str,
    "status": str,
    "history": list,
}
_REPORT_KEYS = {
    "window_start": str,
    "window_end": str,
    "mean_ic": (int, float),
    "ic_std": (int, float),
    "icir": (int, float),
    "ic_hit_ratio": (int, float),
    "turnover": (int, float),
    "coverage": (int, float),
    "decay": list,
    "validated_on": str,
}


def _record_errors(data: Any) -> list[str]:
    if not isinstance(data, dict):
        return ["top level must be a JSON object"]
    errors = []
    for key, kind in _RECORD_KEYS.items():
        if key not in data:
            errors.append(f"missing key {key!r}")
        elif not isinstance(data[key], kind):
            errors.append(f"{key!r} must be a {kind.__name__}")
    extra = sorted(set(data) - set(_RECORD_KEYS))
    if extra:
        errors.append(f"unexpected key(s) {extra}")
    if isinstance(data.get("category"), str) and data["category"] not in {
        c.value for c in FactorCategory
    }:
        errors.append(f"unknown category {data['category']!r}")
    if isinstance(data.get("status"), str) and data["status"] not in {
        s.value for s in FactorStatus
    }:
        errors.append(f"unknown status {data['status']!r}")
    if isinstance(data.get("expression"), str):
        try:
            FactorExpr(data["expression"])
        except InvalidExpression as e:
            errors.append(f"unparsable expression: {e}")
    for position, entry in enumerate(data.get("history") or []):
        if not isinstance(entry, dict):
            errors.append(f"history[{position}] must be an object")
            continue
        for key, kind in _REPORT_KEYS.items():
            if key not in entry:
                errors.append(f"history[{position}] missing key {key!r}")
            elif not isinstance(entry[key], kind) or isinstance(entry[key], bool):
                errors.append(f"history[{position}] {key!r} has the wrong type")
        for key in ("window_start", "window_end", "validated_on"):
            if isinstance(entry.get(key), str):
                try:
                    datetime.date.fromisoformat(entry[key])
                except ValueError:
                    errors.append(f"history[{position}] {key!r} is not an ISO date")
        for pair in entry.get("decay") or []:
            if not (
                isinstance(pair, list)
                and len(pair) == 2
                and isinstance(pair[0], int)
                and (pair[1] is None or isinstance(pair[1], (int, float)))
            ):
                errors.append(f"history[{position}] decay entries must be [h, ic]")
                break
    return errors


def record_from_dict(data: Any, *, source: str = "<record>") -> FactorRecord:
    errors = _record_errors(data)
    if errors:
        raise CorruptRecord(f"{source}: " + "; ".join(errors), errors)
    factor_id = data["factor_id"]
    return FactorRecord(
        factor_id=factor_id,
        expression=data["expression"],
        category=FactorCategory(data["category"]),
        status=FactorStatus(data["status"]),
        history=tuple(
            ValidationReport.from_dict(factor_id, entry) for entry in data["history"]
        ),
    )


def save_factor(record: FactorRecord, directory: str | os.PathLike[str]) -> Path:
    with _library_lock:
        return atomic_write_json(
            Path(directory) / f"{record.factor_id}.json", record.to_dict()
        )


def load_library(directory: str | os.PathLike[str]) -> list[FactorRecord]:
    """Read every ``*.json`` record in ``directory``, ordered by factor id."""
    root = Path(directory)
    if not root.is_dir():
        return []
    records: dict[str, tuple[Path, FactorRecord]] = {}
    with _library_lock:
        paths = sorted(root.glob("*.json"))
        for path in paths:
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
            except (json.JSONDecodeError, UnicodeDecodeError) as e:
                raise CorruptRecord(f"{path.name}: not valid JSON ({e})") from e
            record = record_from_dict(data, source=path.name)
            if record.factor_id in records:
                first = records[record.factor_id][0]
                raise DuplicateFactorId(
                    f"factor_id {record.factor_id!r} appears in both "
                    f"{first.name} and {path.name}"
                )
            records[record.factor_id] = (path, record)
    return [records[key][1] for key in sorted(records)]


class FactorLibrary:
    """The factor set Z: records keyed by factor id, kept in id order."""

    def __init__(self, records: Iterable[FactorRecord] = ()) -> None:
        self._records: dict[str, FactorRecord] = {}
        for record in records:
            self.add(record)

    def add(self, record: FactorRecord) -> None:
        if record.factor_id in self._records:
            raise DuplicateFactorId(f"factor_id {record.factor_id!r} already present")
        self._records[record.factor_id] = record

    def update(self, record: FactorRecord) -> None:
        self._records[record.factor_id] = record

    def get(self, factor_id: str) -> FactorRecord:
        return self._records[factor_id]

    def __contains__(self, factor_id: object) -> bool:
        return factor_id in self._records

    def __iter__(self) -> Iterator[FactorRecord]:
        return iter([self._records[key] for key in sorted(self._records)])

    def __len__(self) -> int:
        return len(self._records)

    def effective(self) -> list[FactorRecord]:
        return [record for record in self if record.status is FactorStatus.EFFECTIVE]

    def copy(self) -> FactorLibrary:
        return FactorLibrary(self)

    def save(self, directory: str | os.PathLike[str]) -> None:
        for record in self:
            save_factor(record, directory)

    @classmethod
    def load(cls, directory: str | os.PathLike[str]) -> FactorLibrary:
        return cls(load_library(directory))


# --------------------------------------------------------------------------------------
# Information coefficient
# --------------------------------------------------------------------------------------
def _daily_correlation(
    x: np.ndarray, y: np.ndarray, *, rank: bool = False
) -> np.ndarray:
    """Per-row correlation over paired finite cells; ``nan`` where undefined."""
    out = np.full(x.shape[0], np.nan)
    for row in range(x.shape[0]):
        paired = np.isfinite(x[row]) & np.isfinite(y[row])
        if paired.sum() < 3:
            continue
        a = x[row][paired]
        b = y[row][paired]
        if a.max() == a.min() or b.max() == b.min():
            continue
        if rank:
            a = rankdata(a)
            b = rankdata(b)
        da = a - a.mean()
        db = b - b.mean()
        value = float(np.dot(da, db) / np.sqrt(np.dot(da, da) * np.dot(db, db)))
        out[row] = min(1.0, max(-1.0, value))
    return out


def ic_series(
    signal: FactorSignal | np.ndarray,
    fwd: np.ndarray,
    *,
    rank: bool = False,
) -> pd.Series:
    """Per-day IC between factor values and forward returns.

    Days with fewer than three paired values or a constant side are skipped.
    """
    values = signal.values if isinstance(signal, FactorSignal) else np.asarray(signal)
    fwd = np.asarray(fwd, dtype=np.float64)
    if values.shape != fwd.shape:
        raise ValueError(f"Signal shape {values.shape} != returns shape {fwd.shape}")
    index = (
        pd.Index(signal.days, name="date")
        if isinstance(signal, FactorSignal)
        else pd.RangeIndex(values.shape[0])
    )
    ics = pd.Series(_daily_correlation(values, fwd, rank=rank), index=index)
    ics = ics.dropna()
    if ics.empty:
        raise NoValidDays("No day has three or more paired non-constant values")
    return ics


def _turnover(values: np.ndarray) -> float:
    terms = []
    for row in range(1, values.shape[0]):
        common = np.isfinite(values[row - 1]) & np.isfinite(values[row])
        if common.sum() < 3:
            continue
        before = values[row - 1][common]
        after = values[row][common]
        if before.max() == before.min() or after.max() == after.min():
            continue
        rho = np.corrcoef(rankdata(before), rankdata(after))[0, 1]
        terms.append(min(1.0, max(0.0, 1.0 - rho)))
    if not terms:
        return 1.0
    return float(np.mean(terms))


def _coverage(values: np.ndarray, members: np.ndarray) -> float:
    fractions = []
    for row in range(values.shape[0]):
        universe = members[row]
        if not universe.any():
            continue
        fractions.append(np.isfinite(values[row][universe]).mean())
    return float(np.mean(fractions)) if fractions else 0.0


def validate(
    expr: FactorExpr,
    panel: PricePanel,
    window: DateRange | None = None,
    *,
    rank_ic: bool = False,
    factor_id: str | None = None,
    validated_on: datetime.date | None = None,
    signal: FactorSignal | None = None,
) -> ValidationReport:
    """Score ``expr`` over ``window`` (default: the whole panel).

    Signals are evaluated with all history up to the window end and forward
    returns never reach past it, so the report uses no data after
    ``window.end``.
    """
    if window is None:
        window = DateRange(panel.days[0], panel.days[-1])
    rows = panel.calendar.span(window.start, window.end)
    visible = panel.head(rows.stop)
    if signal is None:
        signal = evaluate(expr, visible)
    values = signal.values[: rows.stop]

    ics = ic_series(values[rows], visible.forward_return(1)[rows], rank=rank_ic)
    mean_ic = float(ics.mean())
    ic_std = float(ics.std(ddof=1)) if len(ics) > 1 else 0.0
    degenerate = not ic_std > _DEGENERATE_STD
    icir = 0.0 if degenerate else mean_ic / ic_std
    hit_ratio = float((np.sign(ics.to_numpy()) == np.sign(mean_ic)).mean())

    decay: list[tuple[int, float | None]] = [(1, mean_ic)]
    for horizon in DECAY_HORIZONS[1:]:
        if horizon >= len(visible.days):
            decay.append((horizon, None))
            continue
        try:
            later = ic_series(
                values[rows], visible.forward_return(horizon)[rows], rank=rank_ic
            )
        except NoValidDays:
            decay.append((horizon, None))
        else:
            decay.append((horizon, float(later.mean())))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        turnover = _turnover(values[rows])
    coverage = _coverage(values[rows], visible.universe_mask()[rows])

    return ValidationReport(
        factor_id=factor_id or factor_id_for(expr),
        window_start=visible.days[rows.start],
        window_end=visible.days[rows.stop - 1],
        mean_ic=mean_ic,
        ic_std=ic_std,
        icir=icir,
        ic_hit_ratio=hit_ratio,
        turnover=turnover,
        coverage=coverage,
        decay=tuple(decay),
        validated_on=validated_on or visible.days[rows.stop - 1],
    )


def accept(report: ValidationReport, thresholds: AcceptanceConfig) -> bool:
    """Whether a fresh candidate enters the library as effective."""
    stable = report.degenerate or abs(report.icir) >= thresholds.icir_min
    return (
        abs(report.mean_ic) >= thresholds.ic_min
        and stable
        and report.coverage >= thresholds.coverage_min
        and report.turnover <= thresholds.turnover_max
    )


def retain(
    record: FactorRecord, fresh: ValidationReport, *, ratio: float = 0.5
) -> FactorStatus:
    """Keep an effective factor iff its IC kept its sign and at least
    ``ratio`` of its accepted magnitude."""
    if record.status is not FactorStatus.EFFECTIVE:
        raise ValueError(f"{record.factor_id} is {record.status.value}, not effective")
    original = record.accepted_report
    if original is None:
        raise ValueError(f"{record.factor_id} has no acceptance report")
    same_sign = np.sign(fresh.mean_ic) == np.sign(original.mean_ic) != 0
    strong = abs(fresh.mean_ic) >= ratio * abs(original.mean_ic)
    return FactorStatus.EFFECTIVE if same_sign and strong else FactorStatus.DEPRECATED
