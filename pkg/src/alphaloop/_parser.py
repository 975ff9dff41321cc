"""Handwritten parser of factor expressions.

The docstring for each _parse_* function contains EBNF-inspired grammar representing
the implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Union

from ._tokenizer import DEFAULT_RULES, Tokenizer

FIELD_NAMES = frozenset(
    {"open", "high", "low", "close", "volume", "pe", "ps", "pb", "dyr"}
)
UNARY_OPS = frozenset({"abs", "log", "sign", "neg"})
BINARY_OPS = frozenset({"add", "sub", "mul", "div"})
WINDOW_OPS = frozenset(
    {"ts_mean", "ts_std", "ts_min", "ts_max", "ts_sum", "ts_rank", "ts_delta"}
)
PAIR_WINDOW_OPS = frozenset({"ts_corr"})
CROSS_SECTION_OPS = frozenset({"cs_rank", "cs_zscore"})
PARAM_CROSS_SECTION_OPS = frozenset({"cs_winsorize"})

# Number of arguments each function takes, literals included.
ARITY: dict[str, int] = {
    **{op: 1 for op in UNARY_OPS},
    **{op: 2 for op in BINARY_OPS},
    **{op: 2 for op in WINDOW_OPS},
    **{op: 3 for op in PAIR_WINDOW_OPS},
    **{op: 1 for op in CROSS_SECTION_OPS},
    **{op: 2 for op in PARAM_CROSS_SECTION_OPS},
}


class Node:
    """Base class of expression tree nodes."""

    def children(self) -> tuple[Node, ...]:
        return ()

    @property
    def label(self) -> str:
        raise NotImplementedError

    def serialize(self) -> str:
        raise NotImplementedError

    def __str__(self) -> str:
        return self.serialize()


def _format_number(value: float) -> str:
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


@dataclass(frozen=True)
class FieldRef(Node):
    name: str

    @property
    def label(self) -> str:
        return self.name

    def serialize(self) -> str:
        return self.name


@dataclass(frozen=True)
class NumLit(Node):
    value: float

    @property
    def label(self) -> str:
        return _format_number(self.value)

    def serialize(self) -> str:
        return _format_number(self.value)


@dataclass(frozen=True)
class Placeholder(Node):
    """Stands in for any numeric literal in a canonical tree."""

    @property
    def label(self) -> str:
        return "?"

    def serialize(self) -> str:
        return "?"


Literal = Union[NumLit, Placeholder]


class _Call(Node):
    op: str

    @property
    def label(self) -> str:
        return self.op

    def serialize(self) -> str:
        args = ",".join(child.serialize() for child in self.children())
        return f"{self.op}({args})"


@dataclass(frozen=True)
class Unary(_Call):
    op: str
    operand: Node

    def children(self) -> tuple[Node, ...]:
        return (self.operand,)


@dataclass(frozen=True)
class Binary(_Call):
    op: str
    left: Node
    right: Node

    def children(self) -> tuple[Node, ...]:
        return (self.left, self.right)


@dataclass(frozen=True)
class TimeSeries(_Call):
    op: str
    operands: tuple[Node, ...]
    window: Literal

    def children(self) -> tuple[Node, ...]:
        return (*self.operands, self.window)


@dataclass(frozen=True)
class CrossSection(_Call):
    op: str
    operand: Node
    param: Literal | None = None

    def children(self) -> tuple[Node, ...]:
        if self.param is None:
            return (self.operand,)
        return (self.operand, self.param)


def walk(node: Node) -> Iterator[Node]:
    """Pre-order traversal."""
    yield node
    for child in node.children():
        yield from walk(child)


def depth(node: Node) -> int:
    children = node.children()
    if not children:
        return 1
    return 1 + max(depth(child) for child in children)


# --------------------------------------------------------------------------------------
# Recursive descent parser for factor expressions
# --------------------------------------------------------------------------------------
def parse_expression(source: str) -> Node:
    return _parse_expression(Tokenizer(source, rules=DEFAULT_RULES))


def _parse_expression(tokenizer: Tokenizer) -> Node:
    """
    expression = WS? term WS? END
    """
    node = _parse_term(tokenizer)
    if not tokenizer.check("END"):
        tokenizer.raise_syntax_error(
            "Expected end of expression",
            expected=("end of expression",),
        )
    tokenizer.read()
    return node


def _parse_term(tokenizer: Tokenizer) -> Node:
    """
    term = PLACEHOLDER | NUMBER | IDENTIFIER arguments?
    """
    if tokenizer.check("PLACEHOLDER"):
        tokenizer.read()
        return Placeholder()

    if tokenizer.check("NUMBER"):
        return NumLit(float(tokenizer.read().text))

    if not tokenizer.check("IDENTIFIER"):
        tokenizer.raise_syntax_error(
            "Expected a field, a number or a function call",
            expected=("identifier", "number"),
        )
    name_token = tokenizer.read()
    name = name_token.text
    span = (name_token.position, name_token.position + len(name))

    if not tokenizer.check("LEFT_PARENTHESIS", peek=True):
        if name in FIELD_NAMES:
            return FieldRef(name)
        if name in ARITY:
            tokenizer.raise_syntax_error(
                f"Expected '(' after {name}",
                expected=("'('",),
            )
        tokenizer.raise_syntax_error(
            f"Unknown field {name!r}",
            expected=tuple(sorted(FIELD_NAMES)),
            span_start=span[0],
            span_end=span[1],
        )

    if name not in ARITY:
        tokenizer.raise_syntax_error(
            f"Unknown function {name!r}",
            reason="function",
            span_start=span[0],
            span_end=span[1],
        )

    arguments = _parse_arguments(tokenizer, around=name)
    if len(arguments) != ARITY[name]:
        tokenizer.raise_syntax_error(
            f"{name} takes {ARITY[name]} argument(s), got {len(arguments)}",
            reason="arity",
            span_start=span[0],
        )
    return _build_call(tokenizer, name, arguments, span)


def _parse_arguments(tokenizer: Tokenizer, *, around: str) -> list[Node]:
    """
    arguments = LEFT_PARENTHESIS term (COMMA term)* RIGHT_PARENTHESIS
    """
    arguments: list[Node] = []
    with tokenizer.arguments(around=around):
        arguments.append(_parse_term(tokenizer))
        while tokenizer.check("COMMA"):
            tokenizer.read()
            arguments.append(_parse_term(tokenizer))
    return arguments


def _literal(
    tokenizer: Tokenizer, name: str, node: Node, what: str, span: tuple[int, int]
) -> Literal:
    if not isinstance(node, (NumLit, Placeholder)):
        tokenizer.raise_syntax_error(
            f"The {what} of {name} must be a numeric literal",
            reason="window",
            span_start=span[0],
        )
    return node


def _build_call(
    tokenizer: Tokenizer, name: str, arguments: list[Node], span: tuple[int, int]
) -> Node:
    if name in UNARY_OPS:
        return Unary(name, arguments[0])

    if name in BINARY_OPS:
        return Binary(name, arguments[0], arguments[1])

    if name in WINDOW_OPS or name in PAIR_WINDOW_OPS:
        window = _literal(tokenizer, name, arguments[-1], "window", span)
        if isinstance(window, NumLit):
            w = window.value
            if not (math.isfinite(w) and w.is_integer() and w >= 2):
                tokenizer.raise_syntax_error(
                    f"Window of {name} must be an integer >= 2, got {window.label}",
                    reason="window",
                    span_start=span[0],
                )
        return TimeSeries(name, tuple(arguments[:-1]), window)

    if name in PARAM_CROSS_SECTION_OPS:
        param = _literal(tokenizer, name, arguments[1], "quantile", span)
        if isinstance(param, NumLit) and not 0 < param.value < 0.5:
            tokenizer.raise_syntax_error(
                f"Quantile of {name} must lie in (0, 0.5), got {param.label}",
                reason="window",
                span_start=span[0],
            )
        return CrossSection(name, arguments[0], param)

    assert name in CROSS_SECTION_OPS, name
    return CrossSection(name, arguments[0])
