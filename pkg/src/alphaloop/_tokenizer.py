from __future__ import annotations

import contextlib
import re
from dataclasses import dataclass
from typing import Iterator, NoReturn


@dataclass
class Token:
    name: str
    text: str
    position: int


class ParserSyntaxError(Exception):
    """The provided factor expression could not be parsed correctly.

    ``reason`` tells the public layer which error family this belongs to:
    ``"syntax"``, ``"function"``, ``"arity"`` or ``"window"``.
    """

    def __init__(
        self,
        message: str,
        *,
        source: str,
        span: tuple[int, int],
        expected: tuple[str, ...] = (),
        reason: str = "syntax",
    ) -> None:
        self.span = span
        self.message = message
        self.source = source
        self.expected = expected
        self.reason = reason

        super().__init__()

    def __str__(self) -> str:
        marker = " " * self.span[0] + "~" * (self.span[1] - self.span[0]) + "^"
        return "\n    ".join([self.message, self.source, marker])


DEFAULT_RULES: dict[str, str | re.Pattern[str]] = {
    "LEFT_PARENTHESIS": r"\(",
    "RIGHT_PARENTHESIS": r"\)",
    "COMMA": r",",
    "PLACEHOLDER": r"\?",
    "NUMBER": re.compile(
        r"""
            [-+]?
            (
                \d+(\.\d*)?
                |
                \.\d+
            )
            ([eE][-+]?\d+)?
            (?![A-Za-z_])
        """,
        re.VERBOSE,
    ),
    "IDENTIFIER": r"[a-z_][a-z0-9_]*\b",
    "WS": r"\s+",
    "END": r"$",
}

# Human readable names used in "expected ..." messages.
TOKEN_DESCRIPTIONS = {
    "LEFT_PARENTHESIS": "'('",
    "RIGHT_PARENTHESIS": "')'",
    "COMMA": "','",
    "PLACEHOLDER": "'?'",
    "NUMBER": "number",
    "IDENTIFIER": "identifier",
    "END": "end of expression",
}


class Tokenizer:
    """Context-sensitive token reader for factor expressions.

    Whitespace between tokens is insignificant and skipped by ``check``.
    """

    def __init__(
        self,
        source: str,
        *,
        rules: dict[str, str | re.Pattern[str]],
    ) -> None:
        self.source = source
        self.rules: dict[str, re.Pattern[str]] = {
            name: re.compile(pattern) for name, pattern in rules.items()
        }
        self.next_token: Token | None = None
        self.position = 0

    def _skip_whitespace(self) -> None:
        match = self.rules["WS"].match(self.source, self.position)
        if match is not None:
            self.position = match.end()

    def check(self, name: str, *, peek: bool = False) -> bool:
        """Check whether the next token has the provided name.

        If the check succeeds and ``peek`` is false, the token is loaded and
        must be read before the next check.
        """
        assert self.next_token is None, (
            f"Cannot check for {name!r}, already have {self.next_token!r}"
        )
        assert name in self.rules, f"Unknown token name: {name!r}"

        self._skip_whitespace()
        match = self.rules[name].match(self.source, self.position)
        if match is None:
            return False
        if not peek:
            self.next_token = Token(name, match[0], self.position)
        return True

    def expect(self, name: str, *, expected: str) -> Token:
        """Read a token of the given name, failing with a syntax error otherwise."""
        if not self.check(name):
            self.raise_syntax_error(
                f"Expected {expected}", expected=(TOKEN_DESCRIPTIONS.get(name, name),)
            )
        return self.read()

    def read(self) -> Token:
        """Consume the loaded token and return it."""
        token = self.next_token
        assert token is not None

        self.position += len(token.text)
        self.next_token = None

        return token

    def raise_syntax_error(
        self,
        message: str,
        *,
        expected: tuple[str, ...] = (),
        reason: str = "syntax",
        span_start: int | None = None,
        span_end: int | None = None,
    ) -> NoReturn:
        """Raise ParserSyntaxError at the given position."""
        span = (
            self.position if span_start is None else span_start,
            self.position if span_end is None else span_end,
        )
        raise ParserSyntaxError(
            message,
            source=self.source,
            span=span,
            expected=expected,
            reason=reason,
        )

    @contextlib.contextmanager
    def arguments(self, *, around: str) -> Iterator[None]:
        """Require a parenthesized argument list after ``around``."""
        self.expect("LEFT_PARENTHESIS", expected=f"'(' after {around}")
        open_position = self.position - 1

        yield

        if not self.check("RIGHT_PARENTHESIS"):
            self.raise_syntax_error(
                f"Expected ')' closing the arguments of {around}",
                expected=("')'", "','"),
                span_start=open_position,
            )
        self.read()
