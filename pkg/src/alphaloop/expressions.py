# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

"""
Factor expressions: parsing, evaluation over a :class:`~alphaloop.panel.PricePanel`,
canonical forms and structural diversity.
"""

from __future__ import annotations

import datetime
import functools
import importlib.resources
import itertools
import logging
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from ._parser import (
    Binary,
    CrossSection,
    FieldRef,
    Node,
    NumLit,
    Placeholder,
    TimeSeries,
    Unary,
    depth,
    parse_expression,
    walk,
)
from ._tokenizer import ParserSyntaxError
from ._treedist import tree_distance
from .panel import PricePanel

__all__ = [
    "ArityError",
    "BadWindow",
    "EmptyCrossSection",
    "EmptyReference",
    "ExpressionSyntaxError",
    "FactorExpr",
    "FactorSignal",
    "InvalidExpression",
    "TooFewFactors",
    "UnknownFunction",
    "canonicalize",
    "classical_set",
    "evaluate",
    "nted",
    "parse",
    "phi_inter",
    "phi_intra",
]

logger = logging.getLogger(__name__)


class InvalidExpression(ValueError):
    """
    A factor expression could not be parsed or is not well formed.
    """


class ExpressionSyntaxError(InvalidExpression):
    """
    The expression text does not follow the grammar. ``position`` is the
    offset of the offending text and ``expected`` lists what was acceptable
    there.
    """

    def __init__(
        self, message: str, *, position: int = 0, expected: tuple[str, ...] = ()
    ) -> None:
        super().__init__(message)
        self.position = position
        self.expected = expected


class UnknownFunction(InvalidExpression):
    """
    A call names a function that is not part of the operator set.
    """


class ArityError(InvalidExpression):
    """
    A function was called with the wrong number of arguments.
    """


class BadWindow(InvalidExpression):
    """
    A window (or winsorize quantile) literal is out of range or not a literal.
    """


class EmptyCrossSection(ValueError):
    """
    A cross-sectional operator found no day with two or more values.
    """


class TooFewFactors(ValueError):
    """
    A diversity statistic needs at least two factors.
    """


class EmptyReference(ValueError):
    """
    The reference library for a nearest-neighbour distance is empty.
    """


_ERRORS: dict[str, type[InvalidExpression]] = {
    "function": UnknownFunction,
    "arity": ArityError,
    "window": BadWindow,
}


class FactorExpr:
    """A parsed factor expression.

    Instances compare and hash structurally; ``str()`` gives the normalized
    text, which parses back to an equal expression.
    """

    def __init__(self, text: str) -> None:
        try:
            self._root = parse_expression(text)
        except ParserSyntaxError as e:
            error = _ERRORS.get(e.reason)
            if error is None:
                raise ExpressionSyntaxError(
                    str(e), position=e.span[0], expected=e.expected
                ) from e
            raise error(str(e)) from e

    @classmethod
    def from_node(cls, root: Node) -> FactorExpr:
        expr = cls.__new__(cls)
        expr._root = root
        return expr

    @property
    def root(self) -> Node:
        return self._root

    @property
    def size(self) -> int:
        """Number of nodes, literals included."""
        return sum(1 for _ in walk(self._root))

    @property
    def depth(self) -> int:
        return depth(self._root)

    @property
    def fields(self) -> frozenset[str]:
        return frozenset(
            node.name for node in walk(self._root) if isinstance(node, FieldRef)
        )

    @property
    def operators(self) -> frozenset[str]:
        return frozenset(
            node.label
            for node in walk(self._root)
            if not isinstance(node, (FieldRef, NumLit, Placeholder))
        )

    def __str__(self) -> str:
        return self._root.serialize()

    def __repr__(self) -> str:
        return f"<FactorExpr('{self}')>"

    def __hash__(self) -> int:
        return hash((self.__class__.__name__, self._root))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FactorExpr):
            return NotImplemented
        return self._root == other._root


def parse(text: str) -> FactorExpr:
    return FactorExpr(text)


@dataclass(frozen=True)
class FactorSignal:
    """Day x asset scores produced by one expression over one panel."""

    values: np.ndarray
    expr_id: str
    days: tuple[datetime.date, ...]
    assets: tuple[str, ...]

    def row(self, day: datetime.date) -> np.ndarray:
        return self.values[self.days.index(day)]


# --------------------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------------------
class _Evaluator:
    def __init__(self, panel: PricePanel) -> None:
        self.panel = panel
        self.shape = panel.shape

    @functools.singledispatchmethod
    def visit(self, node: Node) -> np.ndarray:
        raise InvalidExpression(f"Cannot evaluate node {node!r}")

    @visit.register
    def _(self, node: FieldRef) -> np.ndarray:
        return np.array(self.panel.field(node.name), dtype=np.float64)

    @visit.register
    def _(self, node: NumLit) -> np.ndarray:
        return np.full(self.shape, node.value)

    @visit.register
    def _(self, node: Placeholder) -> np.ndarray:
        raise InvalidExpression("Canonical expressions carry no values to evaluate")

    @visit.register
    def _(self, node: Unary) -> np.ndarray:
        x = self.visit(node.operand)
        if node.op == "abs":
            return np.abs(x)
        if node.op == "sign":
            return np.sign(x)
        if node.op == "neg":
            return -x
        out = np.full(x.shape, np.nan)
        positive = x > 0
        out[positive] = np.log(x[positive])
        return out

    @visit.register
    def _(self, node: Binary) -> np.ndarray:
        x = self.visit(node.left)
        y = self.visit(node.right)
        if node.op == "add":
            return x + y
        if node.op == "sub":
            return x - y
        if node.op == "mul":
            return x * y
        out = np.full(x.shape, np.nan)
        nonzero = y != 0
        out[nonzero] = x[nonzero] / y[nonzero]
        return out

    @visit.register
    def _(self, node: TimeSeries) -> np.ndarray:
        assert isinstance(node.window, NumLit)
        window = int(node.window.value)
        frames = [pd.DataFrame(self.visit(operand)) for operand in node.operands]
        return _time_series(node.op, frames, window)

    @visit.register
    def _(self, node: CrossSection) -> np.ndarray:
        x = pd.DataFrame(self.visit(node.operand))
        counts = x.count(axis=1)
        if not (counts >= 2).any():
            raise EmptyCrossSection(
                f"{node.op} has no day with two or more values over {node.operand}"
            )
        if node.op == "cs_rank":
            out = (x.rank(axis=1, method="average") - 1.0).div(counts - 1, axis=0)
        elif node.op == "cs_zscore":
            centred = x.sub(x.mean(axis=1), axis=0)
            std = x.std(axis=1, ddof=0)
            constant = x.max(axis=1) == x.min(axis=1)
            out = centred.div(std.mask(constant, 1.0), axis=0)
            out.loc[constant] = 0.0
            out = out.mask(x.isna())
        else:
            assert isinstance(node.param, NumLit)
            p = node.param.value
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", category=RuntimeWarning)
                lower = np.nanquantile(x.to_numpy(), p, axis=1)
                upper = np.nanquantile(x.to_numpy(), 1 - p, axis=1)
            out = x.clip(lower=pd.Series(lower), upper=pd.Series(upper), axis=0)
        out.loc[counts < 2] = np.nan
        return out.to_numpy(dtype=np.float64)


def _time_series(op: str, frames: list[pd.DataFrame], window: int) -> np.ndarray:
    x = frames[0]
    if op == "ts_delta":
        return (x - x.shift(window)).to_numpy(dtype=np.float64)

    rolling = x.rolling(window, min_periods=window)
    if op == "ts_mean":
        out = rolling.mean()
    elif op == "ts_std":
        out = rolling.std(ddof=1)
    elif op == "ts_min":
        out = rolling.min()
    elif op == "ts_max":
        out = rolling.max()
    elif op == "ts_sum":
        out = rolling.sum()
    elif op == "ts_rank":
        out = (rolling.rank(method="average") - 1.0) / (window - 1)
    else:
        assert op == "ts_corr", op
        y = frames[1]
        both = x.notna() & y.notna()
        out = rolling.corr(y.where(both))
        out = out.where(np.isfinite(out)).clip(-1.0, 1.0)
    return out.to_numpy(dtype=np.float64)


def evaluate(
    expr: FactorExpr, panel: PricePanel, *, expr_id: str | None = None
) -> FactorSignal:
    """Evaluate ``expr`` over every day and asset of ``panel``.

    Time-series operators look back over trailing windows only, so the value
    on a day never depends on later rows.
    """
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        values = _Evaluator(panel).visit(expr.root)
    values = np.where(np.isfinite(values), values, np.nan)
    values.flags.writeable = False
    return FactorSignal(values, expr_id or str(expr), panel.days, panel.assets)


# --------------------------------------------------------------------------------------
# Canonical forms and structural diversity
# --------------------------------------------------------------------------------------
def _strip_literals(node: Node) -> Node:
    if isinstance(node, NumLit):
        return Placeholder()
    if isinstance(node, Unary):
        return Unary(node.op, _strip_literals(node.operand))
    if isinstance(node, Binary):
        return Binary(node.op, _strip_literals(node.left), _strip_literals(node.right))
    if isinstance(node, TimeSeries):
        return TimeSeries(
            node.op, tuple(_strip_literals(x) for x in node.operands), Placeholder()
        )
    if isinstance(node, CrossSection):
        param = None if node.param is None else Placeholder()
        return CrossSection(node.op, _strip_literals(node.operand), param)
    return node


def canonicalize(expr: FactorExpr) -> FactorExpr:
    """Replace every numeric literal, windows included, by a placeholder."""
    return FactorExpr.from_node(_strip_literals(expr.root))


def _children(node: Node) -> Sequence[Node]:
    return node.children()


def _label(node: Node) -> str:
    return node.label


def nted(a: FactorExpr, b: FactorExpr) -> float:
    """Tree edit distance normalized by the sum of both tree sizes.

    Callers pass canonical expressions when windows must not count.
    """
    distance = tree_distance(a.root, b.root, _children, _label)
    return distance / (a.size + b.size)


def phi_intra(library: Iterable[FactorExpr]) -> float:
    """Mean canonical distance over all unordered pairs of the library."""
    factors = [canonicalize(expr) for expr in library]
    if len(factors) < 2:
        raise TooFewFactors(f"Need at least 2 factors, got {len(factors)}")
    pairs = list(itertools.combinations(factors, 2))
    return sum(nted(a, b) for a, b in pairs) / len(pairs)


def phi_inter(library: Iterable[FactorExpr], reference: Iterable[FactorExpr]) -> float:
    """Mean distance from each factor to its nearest reference neighbour."""
    factors = [canonicalize(expr) for expr in library]
    references = [canonicalize(expr) for expr in reference]
    if not references:
        raise EmptyReference("Reference library is empty")
    if not factors:
        raise TooFewFactors("Library is empty")
    return sum(min(nted(a, b) for b in references) for a in factors) / len(factors)


@functools.lru_cache(maxsize=None)
def classical_set() -> tuple[FactorExpr, ...]:
    """The built-in reference library shipped with the package."""
    text = (
        importlib.resources.files("alphaloop")
        .joinpath("classical.txt")
        .read_text(encoding="utf-8")
    )
    exprs = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            exprs.append(FactorExpr(line))
    logger.debug("Loaded %d classical reference factors", len(exprs))
    return tuple(exprs)
