# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

"""
The shared memory the agents read and append to: an append-only event log
with a rolling summary.
"""

from __future__ import annotations

import collections
import dataclasses
import datetime
import enum
import json
import os
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from ._fileio import atomic_write_text
from .expressions import FactorExpr, InvalidExpression, canonicalize

__all__ = ["MemoryEvent", "MemoryStore", "MetaTag"]

RECENT_EVENTS = 500


class MetaTag(enum.Enum):
    EFFECTIVE = "effective"
    INEFFECTIVE = "ineffective"
    DEPRECATED = "deprecated"
    IMPROVED = "improved"
    REJECTED = "rejected"
    EXECUTED = "executed"
    INSUFFICIENT_FACTORS = "insufficient_factors"
    EMPTY_ENSEMBLE_SKIPPED = "empty_ensemble_skipped"


def _frozen_payload(payload: Mapping[str, Any] | None) -> str:
    return json.dumps(dict(payload or {}), sort_keys=True, default=str)


@dataclasses.dataclass(frozen=True)
class MemoryEvent:
    seq: int
    day: datetime.date
    agent: str
    kind: str
    meta: MetaTag | None
    # Canonical JSON text; a fresh dict is decoded on every access.
    payload_json: str = "{}"

    @property
    def payload(self) -> dict[str, Any]:
        return json.loads(self.payload_json)  # type: ignore[no-any-return]

    def to_dict(self) -> dict[str, Any]:
        return {
            "day": self.day.isoformat(),
            "agent": self.agent,
            "kind": self.kind,
            "meta": None if self.meta is None else self.meta.value,
            "payload": self.payload,
        }


@dataclasses.dataclass
class _FactorStats:
    validations: int = 0
    last_ic: float | None = None
    last_meta: str | None = None
    ensembles: int = 0


class MemoryStore:
    """Append-only log of agent events.

    Only the last ``keep`` raw events stay in memory for ``recent()``;
    per-factor statistics and the canonical forms already tried summarize
    the rest. The full log is held in memory unless a ``journal`` file is
    given, in which case every event is appended to it as one JSON line.
    """

    def __init__(
        self,
        *,
        keep: int = RECENT_EVENTS,
        journal: str | os.PathLike[str] | None = None,
    ) -> None:
        if keep < 1:
            raise ValueError(f"keep must be positive, got {keep}")
        self._recent: collections.deque[MemoryEvent] = collections.deque(
            maxlen=keep
        )
        self._journal = None if journal is None else Path(journal)
        self._log: list[MemoryEvent] | None = None
        if self._journal is None:
            self._log = []
        else:
            self._journal.parent.mkdir(parents=True, exist_ok=True)
            self._journal.write_text("", encoding="utf-8")
        self._seq = 0
        self._factor_stats: dict[str, _FactorStats] = collections.defaultdict(
            _FactorStats
        )
        self._tried: set[str] = set()
        self._tried_canonical: set[str] = set()
        self._meta_counts: collections.Counter[MetaTag] = collections.Counter()

    @property
    def journal(self) -> Path | None:
        return self._journal

    def append(
        self,
        day: datetime.date,
        agent: str,
        kind: str,
        payload: Mapping[str, Any] | None = None,
        meta: MetaTag | None = None,
    ) -> MemoryEvent:
        event = MemoryEvent(self._seq, day, agent, kind, meta, _frozen_payload(payload))
        self._seq += 1
        self._recent.append(event)
        if self._log is not None:
            self._log.append(event)
        else:
            assert self._journal is not None
            with self._journal.open("a", encoding="utf-8") as f:
                f.write(_line(event))
        self._summarize(event)
        return event

    def _summarize(self, event: MemoryEvent) -> None:
        if event.meta is not None:
            self._meta_counts[event.meta] += 1
        payload = event.payload
        expression = payload.get("expression")
        if isinstance(expression, str):
            self._tried.add(expression)
            canonical = _canonical_text(expression)
            if canonical is not None:
                self._tried_canonical.add(canonical)
        factor_id = payload.get("factor_id")
        if isinstance(factor_id, str):
            stats = self._factor_stats[factor_id]
            stats.validations += 1
            if isinstance(payload.get("mean_ic"), (int, float)):
                stats.last_ic = float(payload["mean_ic"])
            if event.meta is not None:
                stats.last_meta = event.meta.value
        for entry in payload.get("entries") or ():
            if isinstance(entry, dict) and isinstance(entry.get("factor_id"), str):
                self._factor_stats[entry["factor_id"]].ensembles += 1

    @property
    def events(self) -> tuple[MemoryEvent, ...]:
        """Every event appended so far, read back from the journal if any."""
        if self._log is not None:
            return tuple(self._log)
        assert self._journal is not None
        with self._journal.open(encoding="utf-8") as f:
            return tuple(
                _event(seq, json.loads(line))
                for seq, line in enumerate(f)
                if line.strip()
            )

    def __len__(self) -> int:
        return self._seq

    def __iter__(self) -> Iterator[MemoryEvent]:
        return iter(self.events)

    def recent(self, n: int = RECENT_EVENTS) -> tuple[MemoryEvent, ...]:
        """The last ``n`` raw events, at most ``keep`` of them."""
        return tuple(self._recent)[-n:] if n > 0 else ()

    def count(self, meta: MetaTag) -> int:
        return self._meta_counts[meta]

    def by_agent(self, agent: str) -> list[MemoryEvent]:
        return [event for event in self.events if event.agent == agent]

    def tried(self, expression: str) -> bool:
        return expression in self._tried

    def tried_canonical(self, expr: FactorExpr) -> bool:
        """Whether any expression with ``expr``'s canonical form was tried,
        whatever its window lengths."""
        return str(canonicalize(expr)) in self._tried_canonical

    def factor_stats(self) -> dict[str, dict[str, Any]]:
        return {
            factor_id: dataclasses.asdict(stats)
            for factor_id, stats in sorted(self._factor_stats.items())
        }

    def summary(self) -> dict[str, Any]:
        return {
            "events": self._seq,
            "meta": {tag.value: self._meta_counts[tag] for tag in MetaTag},
            "tried_expressions": len(self._tried),
            "tried_canonical": len(self._tried_canonical),
            "factors": self.factor_stats(),
        }

    def to_ndjson(self) -> str:
        if self._journal is not None:
            return self._journal.read_text(encoding="utf-8")
        return "".join(_line(event) for event in self.events)

    def write(self, path: str | os.PathLike[str]) -> Path:
        path = Path(path)
        if self._journal is not None and path.resolve() == self._journal.resolve():
            return path
        return atomic_write_text(path, self.to_ndjson())

    @classmethod
    def replay(
        cls,
        lines: Iterable[str],
        *,
        keep: int = RECENT_EVENTS,
        journal: str | os.PathLike[str] | None = None,
    ) -> MemoryStore:
        """Rebuild a store from its newline-delimited JSON dump."""
        store = cls(keep=keep, journal=journal)
        for line in lines:
            if not line.strip():
                continue
            event = _event(0, json.loads(line))
            store.append(
                event.day, event.agent, event.kind, event.payload, event.meta
            )
        return store


def _line(event: MemoryEvent) -> str:
    return json.dumps(event.to_dict(), sort_keys=True) + "\n"


def _event(seq: int, data: Mapping[str, Any]) -> MemoryEvent:
    return MemoryEvent(
        seq,
        datetime.date.fromisoformat(data["day"]),
        data["agent"],
        data["kind"],
        None if data["meta"] is None else MetaTag(data["meta"]),
        _frozen_payload(data["payload"]),
    )


def _canonical_text(expression: str) -> str | None:
    try:
        return str(canonicalize(FactorExpr(expression)))
    except InvalidExpression:
        return None
