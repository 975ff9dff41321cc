# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

"""
Daily market data: trading calendars, aligned day x asset matrices and
asset universes, loaded from per-asset CSV files.
"""

from __future__ import annotations

import datetime
import enum
import functools
import hashlib
import io
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple

import numpy as np
import pandas as pd

__all__ = [
    "FIELDS",
    "FUNDAMENTAL_FIELDS",
    "PRICE_FIELDS",
    "DateOutOfRange",
    "DateRange",
    "EmptyUniverse",
    "HorizonTooLarge",
    "MalformedCsv",
    "MarketId",
    "OhlcViolation",
    "PricePanel",
    "TradingCalendar",
    "UnknownField",
    "Universe",
    "load_panel",
]

logger = logging.getLogger(__name__)

PRICE_FIELDS = ("open", "high", "low", "close", "volume")
FUNDAMENTAL_FIELDS = ("pe", "ps", "pb", "dyr")
FIELDS = PRICE_FIELDS + FUNDAMENTAL_FIELDS

# File stems inside a data directory that are not assets.
_RESERVED_STEMS = frozenset({"fundamentals", "universe", "index"})


class MalformedCsv(ValueError):
    """
    A data file does not follow its CSV schema (missing columns, unparsable
    dates or numbers, duplicate rows, unknown assets).
    """


class OhlcViolation(ValueError):
    """
    A bar breaks the price invariants: low <= open/close <= high, low > 0 and
    volume >= 0.
    """


class EmptyUniverse(ValueError):
    """
    The data directory holds no asset files.
    """


class HorizonTooLarge(ValueError):
    """
    A forward-return horizon is not smaller than the number of days.
    """


class DateOutOfRange(ValueError):
    """
    A requested date range is reversed or falls outside the calendar.
    """


class UnknownField(ValueError):
    """
    A field name was requested that the panel does not carry.
    """


class DateRange(NamedTuple):
    """Inclusive range of calendar dates."""

    start: datetime.date
    end: datetime.date

    def __str__(self) -> str:
        return f"{self.start.isoformat()}..{self.end.isoformat()}"

    @classmethod
    def parse(cls, text: str) -> DateRange:
        start, sep, end = text.strip().partition("..")
        if not sep:
            raise ValueError(f"Expected 'YYYY-MM-DD..YYYY-MM-DD', got {text!r}")
        return cls(
            datetime.date.fromisoformat(start.strip()),
            datetime.date.fromisoformat(end.strip()),
        )


class MarketId(enum.Enum):
    CSI_LIKE = "csi"
    US_LIKE = "us"

    @property
    def days_per_year(self) -> int:
        return 243 if self is MarketId.CSI_LIKE else 252

    @classmethod
    def parse(cls, value: str | MarketId) -> MarketId:
        if isinstance(value, MarketId):
            return value
        key = value.strip().lower()
        for member in cls:
            if key in (member.value, member.name.lower()):
                return member
        raise ValueError(f"Unknown market profile: {value!r}")


@dataclass(frozen=True)
class TradingCalendar:
    market_id: MarketId
    days: tuple[datetime.date, ...]

    def __post_init__(self) -> None:
        for earlier, later in zip(self.days, self.days[1:]):
            if not earlier < later:
                raise ValueError(
                    f"Calendar days must be strictly increasing: {earlier} >= {later}"
                )

    @property
    def days_per_year(self) -> int:
        return self.market_id.days_per_year

    def __len__(self) -> int:
        return len(self.days)

    def index(self, day: datetime.date) -> int:
        position = int(np.searchsorted(self._ordinals, day.toordinal()))
        if position == len(self.days) or self.days[position] != day:
            raise DateOutOfRange(f"{day} is not a trading day of this calendar")
        return position

    def span(self, start: datetime.date, end: datetime.date) -> slice:
        """Row slice of the trading days inside ``[start, end]``."""
        if start > end:
            raise DateOutOfRange(f"Start {start} is after end {end}")
        if not self.days or start < self.days[0] or end > self.days[-1]:
            raise DateOutOfRange(
                f"Range {start}..{end} is outside the calendar "
                f"{self.days[0] if self.days else None}.."
                f"{self.days[-1] if self.days else None}"
            )
        first = int(np.searchsorted(self._ordinals, start.toordinal(), "left"))
        stop = int(np.searchsorted(self._ordinals, end.toordinal(), "right"))
        return slice(first, stop)

    @functools.cached_property
    def _ordinals(self) -> np.ndarray:
        return np.fromiter((day.toordinal() for day in self.days), dtype=np.int64)


class Universe:
    """Point-in-time membership of tradable assets.

    ``None`` membership means every panel asset is a member on every day.
    Listed memberships carry forward until the next listed date.
    """

    def __init__(
        self, membership: Mapping[datetime.date, frozenset[str]] | None = None
    ) -> None:
        self._membership = (
            None if membership is None else dict(sorted(membership.items()))
        )

    @property
    def is_full(self) -> bool:
        return self._membership is None

    def members(self, day: datetime.date) -> frozenset[str] | None:
        if self._membership is None:
            return None
        current: frozenset[str] = frozenset()
        for listed, assets in self._membership.items():
            if listed > day:
                break
            current = assets
        return current

    def assets(self) -> frozenset[str]:
        if self._membership is None:
            return frozenset()
        return frozenset().union(*self._membership.values())

    def mask(
        self, days: Iterable[datetime.date], assets: tuple[str, ...]
    ) -> np.ndarray:
        day_list = list(days)
        result = np.ones((len(day_list), len(assets)), dtype=bool)
        if self._membership is None:
            return result
        for row, day in enumerate(day_list):
            members = self.members(day) or frozenset()
            result[row] = [asset in members for asset in assets]
        return result

    def to_rows(self) -> Iterator[tuple[datetime.date, str]]:
        if self._membership is None:
            return
        for day, assets in self._membership.items():
            for asset in sorted(assets):
                yield day, asset

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Universe):
            return NotImplemented
        return self._membership == other._membership

    def __repr__(self) -> str:
        if self._membership is None:
            return "<Universe(full)>"
        return f"<Universe({len(self._membership)} listed dates)>"


def _frozen(values: np.ndarray) -> np.ndarray:
    array = np.array(values, dtype=np.float64, copy=True)
    array.flags.writeable = False
    return array


class PricePanel:
    """Immutable day x asset matrices over a trading calendar.

    Missing cells hold ``nan``. Fundamental fields are optional.
    """

    def __init__(
        self,
        calendar: TradingCalendar,
        assets: Iterable[str],
        fields: Mapping[str, np.ndarray],
        *,
        universe: Universe | None = None,
        index_bars: Mapping[str, np.ndarray] | None = None,
    ) -> None:
        self.calendar = calendar
        self.assets = tuple(assets)
        self.universe = universe or Universe()
        shape = (len(calendar), len(self.assets))

        missing = [name for name in PRICE_FIELDS if name not in fields]
        if missing:
            raise UnknownField(f"Panel requires fields {missing}")
        self._fields: dict[str, np.ndarray] = {}
        for name, values in fields.items():
            if name not in FIELDS:
                raise UnknownField(f"Unknown panel field {name!r}")
            array = _frozen(values)
            if array.shape != shape:
                raise ValueError(
                    f"Field {name!r} has shape {array.shape}, expected {shape}"
                )
            self._fields[name] = array

        unknown = self.universe.assets() - set(self.assets)
        if unknown:
            raise MalformedCsv(f"Universe lists unknown assets {sorted(unknown)}")

        self._index: dict[str, np.ndarray] | None = None
        if index_bars is not None:
            self._index = {
                name: _frozen(index_bars[name])
                for name in ("open", "high", "low", "close")
            }
            for name, array in self._index.items():
                if array.shape != (shape[0],):
                    raise ValueError(f"Index field {name!r} has shape {array.shape}")
        self._check_bars()

    def _check_bars(self) -> None:
        o, h, lo, c, v = (self._fields[name] for name in PRICE_FIELDS)
        with np.errstate(invalid="ignore"):
            bad = (lo > o) | (o > h) | (lo > c) | (c > h) | (lo <= 0) | (v < 0)
        if bad.any():
            row, column = (int(i) for i in np.argwhere(bad)[0])
            raise OhlcViolation(
                f"Bar {self.calendar.days[row]} {self.assets[column]!r} breaks "
                f"low <= open/close <= high, low > 0, volume >= 0"
            )

    def __repr__(self) -> str:
        return (
            f"<PricePanel({self.calendar.market_id.value!r}, "
            f"{len(self.days)} days x {len(self.assets)} assets)>"
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PricePanel):
            return NotImplemented
        return (
            self.calendar == other.calendar
            and self.assets == other.assets
            and self._fields.keys() == other._fields.keys()
            and all(
                np.array_equal(values, other._fields[name], equal_nan=True)
                for name, values in self._fields.items()
            )
            and self.universe == other.universe
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def days(self) -> tuple[datetime.date, ...]:
        return self.calendar.days

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.calendar), len(self.assets))

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(name for name in FIELDS if name in self._fields)

    def has_field(self, name: str) -> bool:
        return name in self._fields

    def field(self, name: str) -> np.ndarray:
        try:
            return self._fields[name]
        except KeyError:
            raise UnknownField(
                f"Field {name!r} is not available in this panel "
                f"(has {', '.join(self.field_names)})"
            ) from None

    @property
    def close(self) -> np.ndarray:
        return self._fields["close"]

    def universe_mask(self) -> np.ndarray:
        return self.universe.mask(self.days, self.assets)

    def slice(self, start: datetime.date, end: datetime.date) -> PricePanel:
        rows = self.calendar.span(start, end)
        if rows.start == rows.stop:
            raise DateOutOfRange(f"No trading days between {start} and {end}")
        return self._take(rows)

    def head(self, stop: int) -> PricePanel:
        """Rows ``[0, stop)``; the view an agent has at the close of ``stop - 1``."""
        return self._take(slice(0, stop))

    def _take(self, rows: slice) -> PricePanel:
        calendar = TradingCalendar(self.calendar.market_id, self.days[rows])
        index = (
            None
            if self._index is None
            else {name: values[rows] for name, values in self._index.items()}
        )
        return PricePanel(
            calendar,
            self.assets,
            {name: values[rows] for name, values in self._fields.items()},
            universe=self.universe,
            index_bars=index,
        )

    def forward_return(self, horizon: int = 1) -> np.ndarray:
        """``close[t + h] / close[t] - 1``; the last ``h`` rows are missing."""
        if horizon < 1:
            raise ValueError(f"Horizon must be positive, got {horizon}")
        if horizon >= len(self.days):
            raise HorizonTooLarge(
                f"Horizon {horizon} needs more than {len(self.days)} days"
            )
        close = self.close
        result = np.full(close.shape, np.nan)
        result[:-horizon] = close[horizon:] / close[:-horizon] - 1.0
        return result

    def market_index(self) -> pd.DataFrame:
        """Index bars (open, high, low, close) per day.

        Uses the loaded index file when present, otherwise an equal-weight
        index chained from constituent bars.
        """
        if self._index is not None:
            return pd.DataFrame(self._index, index=pd.Index(self.days, name="date"))

        close = self.close
        bars = {name: self._fields[name] for name in ("open", "high", "low")}
        n_days = len(self.days)
        out = {name: np.empty(n_days) for name in ("open", "high", "low", "close")}
        level = 1000.0
        with np.errstate(invalid="ignore", divide="ignore"):
            for row in range(n_days):
                base = close[row] if row == 0 else close[row - 1]
                ok = np.isfinite(base) & np.isfinite(close[row])
                if not ok.any():
                    for name in out:
                        out[name][row] = level
                    continue
                for name, values in bars.items():
                    out[name][row] = level * np.mean(values[row][ok] / base[ok])
                out["close"][row] = level * np.mean(close[row][ok] / base[ok])
                level = out["close"][row]
        return pd.DataFrame(out, index=pd.Index(self.days, name="date"))

    def to_frame(self) -> pd.DataFrame:
        """Long format: one row per (date, asset) sorted by date then asset."""
        n_days, n_assets = self.shape
        frame = pd.DataFrame(
            {
                "date": np.repeat([day.isoformat() for day in self.days], n_assets),
                "asset": np.tile(self.assets, n_days),
            }
        )
        for name in self.field_names:
            frame[name] = self._fields[name].reshape(-1)
        return frame

    def serialize(self) -> bytes:
        buffer = io.StringIO()
        buffer.write(f"# market={self.calendar.market_id.value}\n")
        self.to_frame().to_csv(buffer, index=False, lineterminator="\n")
        for day, asset in self.universe.to_rows():
            buffer.write(f"# member={day.isoformat()},{asset}\n")
        return buffer.getvalue().encode("utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()


# --------------------------------------------------------------------------------------
# CSV loading
# --------------------------------------------------------------------------------------
def _read_table(path: Path, columns: tuple[str, ...]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise MalformedCsv(f"{path.name}: {e}") from e
    frame.columns = [str(column).strip().lower() for column in frame.columns]
    absent = [column for column in columns if column not in frame.columns]
    if absent:
        raise MalformedCsv(f"{path.name}: missing columns {absent}")
    return frame


def _parse_dates(path: Path, values: pd.Series) -> pd.Series:
    dates = pd.to_datetime(values.str.strip(), format="%Y-%m-%d", errors="coerce")
    bad = dates.isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise MalformedCsv(
            f"{path.name}: row {row + 2}: unparsable date {values.iloc[row]!r}"
        )
    return dates.dt.date


def _parse_numbers(
    path: Path, frame: pd.DataFrame, columns: tuple[str, ...], *, allow_empty: bool
) -> dict[str, np.ndarray]:
    parsed = {}
    for column in columns:
        raw = frame[column].str.strip()
        numbers = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=np.float64)
        bad = np.isnan(numbers)
        if allow_empty:
            bad &= (raw != "").to_numpy()
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise MalformedCsv(
                f"{path.name}: row {row + 2}: column {column!r} is not a number: "
                f"{frame[column].iloc[row]!r}"
            )
        parsed[column] = numbers
    return parsed


def _check_rows(path: Path, dates: pd.Series, bars: dict[str, np.ndarray]) -> None:
    for row in range(len(dates)):
        o, h, lo, c, v = (bars[name][row] for name in PRICE_FIELDS)
        problem = None
        if lo > h:
            problem = f"low={lo:g} > high={h:g}"
        elif not lo <= o <= h:
            problem = f"open={o:g} outside [low={lo:g}, high={h:g}]"
        elif not lo <= c <= h:
            problem = f"close={c:g} outside [low={lo:g}, high={h:g}]"
        elif lo <= 0:
            problem = f"low={lo:g} is not positive"
        elif v < 0:
            problem = f"volume={v:g} is negative"
        if problem is not None:
            raise OhlcViolation(
                f"{path.name}: row {row + 2} ({dates.iloc[row]}): {problem}"
            )


def _read_bars(path: Path) -> tuple[pd.Series, dict[str, np.ndarray]]:
    frame = _read_table(path, ("date", *PRICE_FIELDS))
    dates = _parse_dates(path, frame["date"])
    duplicated = dates.duplicated()
    if duplicated.any():
        row = int(np.flatnonzero(duplicated.to_numpy())[0])
        raise MalformedCsv(
            f"{path.name}: row {row + 2}: duplicate date {dates.iloc[row]}"
        )
    bars = _parse_numbers(path, frame, PRICE_FIELDS, allow_empty=False)
    _check_rows(path, dates, bars)
    return dates, bars


def _scatter(
    days: tuple[datetime.date, ...], dates: pd.Series, values: np.ndarray
) -> np.ndarray:
    lookup = {day: row for row, day in enumerate(days)}
    column = np.full(len(days), np.nan)
    for date, value in zip(dates, values):
        row = lookup.get(date)
        if row is not None:
            column[row] = value
    return column


def load_panel(data_dir: str | os.PathLike[str], profile: str | MarketId) -> PricePanel:
    """Load every ``<asset>.csv`` in ``data_dir`` into a validated panel.

    The calendar is the union of the asset files' dates; an asset without a
    bar on a calendar day is missing there. ``fundamentals.csv``,
    ``universe.csv`` and ``index.csv`` are optional companions.
    """
    directory = Path(data_dir)
    market = MarketId.parse(profile)
    asset_files = (
        sorted(
            path
            for path in directory.glob("*.csv")
            if path.stem.lower() not in _RESERVED_STEMS
        )
        if directory.is_dir()
        else []
    )
    if not asset_files:
        raise EmptyUniverse(f"No asset CSV files in {str(directory)!r}")

    loaded = {}
    for path in asset_files:
        logger.debug("Reading bars for '%s'", path.stem)
        loaded[path.stem] = _read_bars(path)

    calendar_days = sorted(set().union(*(set(dates) for dates, _ in loaded.values())))
    calendar = TradingCalendar(market, tuple(calendar_days))
    assets = tuple(loaded)
    fields = {
        name: np.column_stack(
            [
                _scatter(calendar.days, dates, bars[name])
                for dates, bars in loaded.values()
            ]
        )
        for name in PRICE_FIELDS
    }

    fundamentals_path = directory / "fundamentals.csv"
    if fundamentals_path.exists():
        fields.update(_read_fundamentals(fundamentals_path, calendar, assets))

    universe_path = directory / "universe.csv"
    universe = _read_universe(universe_path, assets) if universe_path.exists() else None

    index_path = directory / "index.csv"
    index_bars = None
    if index_path.exists():
        dates, bars = _read_bars(index_path)
        index_bars = {
            name: _scatter(calendar.days, dates, bars[name])
            for name in ("open", "high", "low", "close")
        }

    panel = PricePanel(
        calendar, assets, fields, universe=universe, index_bars=index_bars
    )
    logger.info(
        "Loaded %d assets over %d trading days from '%s'",
        len(assets),
        len(calendar),
        directory,
    )
    return panel


def _read_fundamentals(
    path: Path, calendar: TradingCalendar, assets: tuple[str, ...]
) -> dict[str, np.ndarray]:
    frame = _read_table(path, ("date", "asset", *FUNDAMENTAL_FIELDS))
    dates = _parse_dates(path, frame["date"])
    numbers = _parse_numbers(path, frame, FUNDAMENTAL_FIELDS, allow_empty=True)
    day_rows = {day: row for row, day in enumerate(calendar.days)}
    asset_columns = {asset: column for column, asset in enumerate(assets)}
    shape = (len(calendar), len(assets))
    out = {name: np.full(shape, np.nan) for name in FUNDAMENTAL_FIELDS}
    seen: set[tuple[datetime.date, str]] = set()
    for row, (date, asset) in enumerate(zip(dates, frame["asset"].str.strip())):
        column = asset_columns.get(asset)
        if column is None:
            raise MalformedCsv(f"{path.name}: row {row + 2}: unknown asset {asset!r}")
        if (date, asset) in seen:
            raise MalformedCsv(
                f"{path.name}: row {row + 2}: duplicate entry for {asset!r} on {date}"
            )
        seen.add((date, asset))
        day_row = day_rows.get(date)
        if day_row is None:
            continue
        for name in FUNDAMENTAL_FIELDS:
            out[name][day_row, column] = numbers[name][row]
    return out


def _read_universe(path: Path, assets: tuple[str, ...]) -> Universe:
    frame = _read_table(path, ("date", "asset"))
    dates = _parse_dates(path, frame["date"])
    known = set(assets)
    membership: dict[datetime.date, set[str]] = {}
    for row, (date, asset) in enumerate(zip(dates, frame["asset"].str.strip())):
        if asset not in known:
            raise MalformedCsv(f"{path.name}: row {row + 2}: unknown asset {asset!r}")
        membership.setdefault(date, set()).add(asset)
    return Universe({day: frozenset(members) for day, members in membership.items()})
