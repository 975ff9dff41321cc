# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

import functools
import itertools

import numpy as np
import pytest

from alphaloop.expressions import (
    ArityError,
    BadWindow,
    EmptyCrossSection,
    EmptyReference,
    ExpressionSyntaxError,
    FactorExpr,
    InvalidExpression,
    TooFewFactors,
    UnknownFunction,
    canonicalize,
    classical_set,
    evaluate,
    nted,
    phi_inter,
    phi_intra,
)


def as_tree(node):
    return (node.label, tuple(as_tree(child) for child in node.children()))


@functools.lru_cache(maxsize=None)
def forest_distance(left, right):
    """Edit distance between two ordered forests, straight from the recurrence."""
    if not left and not right:
        return 0
    if not right:
        label, children = left[-1]
        return forest_distance(left[:-1] + children, right) + 1
    if not left:
        label, children = right[-1]
        return forest_distance(left, right[:-1] + children) + 1
    (a_label, a_children), (b_label, b_children) = left[-1], right[-1]
    return min(
        forest_distance(left[:-1] + a_children, right) + 1,
        forest_distance(left, right[:-1] + b_children) + 1,
        forest_distance(a_children, b_children)
        + forest_distance(left[:-1], right[:-1])
        + (a_label != b_label),
    )


FIELDS = ["open", "high", "low", "close", "volume", "pe", "ps", "pb", "dyr"]
UNARY = ["abs", "log", "sign", "neg"]
BINARY = ["add", "sub", "mul", "div"]
WINDOWED = ["ts_mean", "ts_std", "ts_min", "ts_max", "ts_sum", "ts_rank", "ts_delta"]
CONSTANTS = ["-1", "2", "0.5", "100"]


def random_text(rng, depth=4):
    """Normalized text of a random well-formed expression."""
    if depth <= 1 or rng.random() < 0.2:
        return str(rng.choice(FIELDS))
    inner = functools.partial(random_text, rng, depth - 1)
    kind = int(rng.integers(7))
    if kind == 0:
        return f"{rng.choice(UNARY)}({inner()})"
    if kind == 1:
        return f"{rng.choice(BINARY)}({inner()},{inner()})"
    if kind == 2:
        return f"{rng.choice(BINARY)}({inner()},{rng.choice(CONSTANTS)})"
    if kind == 3:
        return f"{rng.choice(WINDOWED)}({inner()},{rng.integers(2, 61)})"
    if kind == 4:
        return f"ts_corr({inner()},{inner()},{rng.integers(2, 61)})"
    if kind == 5:
        return f"{rng.choice(['cs_rank', 'cs_zscore'])}({inner()})"
    return f"cs_winsorize({inner()},{rng.choice(['0.01', '0.05', '0.1'])})"


class TestParse:
    @pytest.mark.parametrize(
        ("text", "normalized"),
        [
            ("close", "close"),
            ("cs_rank( ts_mean(close , 20) )", "cs_rank(ts_mean(close,20))"),
            ("div(close,2.50)", "div(close,2.5)"),
            ("ts_corr(close,volume,10)", "ts_corr(close,volume,10)"),
            ("cs_winsorize(pe,0.05)", "cs_winsorize(pe,0.05)"),
            ("ts_delta(close,5.0)", "ts_delta(close,5)"),
            ("mul(-1,close)", "mul(-1,close)"),
        ],
    )
    def test_normalized_text(self, text, normalized):
        expr = FactorExpr(text)
        assert str(expr) == normalized
        assert FactorExpr(normalized) == expr
        assert hash(FactorExpr(normalized)) == hash(expr)

    def test_properties(self):
        expr = FactorExpr("cs_rank(div(close,ts_mean(volume,20)))")
        assert expr.size == 6
        assert expr.depth == 4
        assert expr.fields == {"close", "volume"}
        assert expr.operators == {"cs_rank", "div", "ts_mean"}

    @pytest.mark.parametrize(
        ("text", "error"),
        [
            ("", ExpressionSyntaxError),
            ("cs_rank(close", ExpressionSyntaxError),
            ("close)", ExpressionSyntaxError),
            ("price", ExpressionSyntaxError),
            ("cs_rank", ExpressionSyntaxError),
            ("Close", ExpressionSyntaxError),
            ("foo(close)", UnknownFunction),
            ("ts_mean(close)", ArityError),
            ("add(close,open,high)", ArityError),
            ("ts_mean(close,1)", BadWindow),
            ("ts_mean(close,2.5)", BadWindow),
            ("ts_mean(close,-5)", BadWindow),
            ("ts_mean(close,volume)", BadWindow),
            ("cs_winsorize(close,0.5)", BadWindow),
            ("cs_winsorize(close,0)", BadWindow),
        ],
    )
    def test_invalid(self, text, error):
        with pytest.raises(error) as info:
            FactorExpr(text)
        assert isinstance(info.value, InvalidExpression)
        assert isinstance(info.value, ValueError)

    def test_round_trip_on_generated(self):
        rng = np.random.default_rng(21)
        for _ in range(500):
            text = random_text(rng)
            expr = FactorExpr(text)
            assert str(expr) == text
            assert FactorExpr(str(expr)) == expr
            assert FactorExpr(text.replace(",", " , ")) == expr
            assert str(canonicalize(FactorExpr(str(canonicalize(expr))))) == str(
                canonicalize(expr)
            )

    def test_syntax_error_position(self):
        with pytest.raises(ExpressionSyntaxError) as info:
            FactorExpr("add(close,,open)")
        assert info.value.position == 10
        assert "number" in info.value.expected


class TestEvaluate:
    def test_fields_and_arithmetic(self, make_panel):
        panel = make_panel([[10.0, 20.0], [12.0, 18.0]])
        values = evaluate(FactorExpr("div(sub(close,open),2)"), panel).values
        assert values.tolist() == [[0.0, 0.0], [0.0, 0.0]]
        values = evaluate(FactorExpr("neg(log(close))"), panel).values
        assert values[0] == pytest.approx(-np.log([10.0, 20.0]))

    def test_division_by_zero_is_missing(self, make_panel):
        panel = make_panel([[10.0, 20.0]])
        values = evaluate(FactorExpr("div(close,sub(close,close))"), panel).values
        assert np.isnan(values).all()

    def test_ts_mean_is_trailing(self, make_panel):
        panel = make_panel(np.arange(1.0, 8.0))
        values = evaluate(FactorExpr("ts_mean(close,3)"), panel).values[:, 0]
        assert np.isnan(values[:2]).all()
        assert values[2:].tolist() == pytest.approx([2.0, 3.0, 4.0, 5.0, 6.0])

    def test_no_lookahead(self, random_panel):
        expr = FactorExpr("cs_rank(ts_corr(close,volume,10))")
        full = evaluate(expr, random_panel).values
        partial = evaluate(expr, random_panel.head(60)).values
        np.testing.assert_array_equal(full[:60], partial)

    @pytest.mark.parametrize(
        ("text", "expected"),
        [
            ("ts_delta(close,2)", [np.nan, np.nan, 2.0, 2.0]),
            ("ts_sum(close,2)", [np.nan, 3.0, 5.0, 7.0]),
            ("ts_max(close,2)", [np.nan, 2.0, 3.0, 4.0]),
            ("ts_min(close,2)", [np.nan, 1.0, 2.0, 3.0]),
            ("ts_rank(close,2)", [np.nan, 1.0, 1.0, 1.0]),
        ],
    )
    def test_window_operators(self, make_panel, text, expected):
        panel = make_panel([1.0, 2.0, 3.0, 4.0])
        values = evaluate(FactorExpr(text), panel).values[:, 0]
        np.testing.assert_allclose(values, expected)

    def test_cs_rank(self, make_panel):
        panel = make_panel([[3.0, 1.0, 2.0, np.nan]])
        values = evaluate(FactorExpr("cs_rank(close)"), panel).values[0]
        np.testing.assert_allclose(values, [1.0, 0.0, 0.5, np.nan])

    def test_cs_zscore_constant_row(self, make_panel):
        panel = make_panel([[5.0, 5.0, 5.0], [1.0, 2.0, 3.0]])
        values = evaluate(FactorExpr("cs_zscore(close)"), panel).values
        assert values[0].tolist() == [0.0, 0.0, 0.0]
        assert values[1] == pytest.approx([-np.sqrt(1.5), 0.0, np.sqrt(1.5)])

    def test_cs_needs_two_values(self, make_panel):
        panel = make_panel([[1.0], [2.0]])
        with pytest.raises(EmptyCrossSection):
            evaluate(FactorExpr("cs_rank(close)"), panel)

    def test_signal_row(self, random_panel):
        signal = evaluate(FactorExpr("close"), random_panel, expr_id="f1")
        assert signal.expr_id == "f1"
        assert signal.row(random_panel.days[5]).tolist() == (
            random_panel.close[5].tolist()
        )
        with pytest.raises(ValueError):
            signal.values[0, 0] = 1.0

    def test_placeholder_not_evaluable(self, random_panel):
        with pytest.raises(InvalidExpression):
            evaluate(FactorExpr("add(close,?)"), random_panel)


class TestDiversity:
    def test_canonicalize(self):
        expr = FactorExpr("cs_winsorize(ts_mean(mul(close,2),20),0.1)")
        assert str(canonicalize(expr)) == "cs_winsorize(ts_mean(mul(close,?),?),?)"

    def test_windows_do_not_count(self):
        a = canonicalize(FactorExpr("ts_mean(close,5)"))
        b = canonicalize(FactorExpr("ts_mean(close,20)"))
        assert nted(a, b) == 0.0

    def test_relabel(self):
        a = FactorExpr("ts_mean(close,5)")
        b = FactorExpr("ts_mean(open,5)")
        assert nted(a, b) == pytest.approx(1 / 6)

    def test_disjoint(self):
        assert nted(FactorExpr("close"), FactorExpr("volume")) == 0.5

    SMALL = [
        "close",
        "neg(close)",
        "add(close,open)",
        "sub(open,close)",
        "ts_mean(close,5)",
        "cs_rank(ts_mean(close,5))",
        "div(ts_std(close,20),ts_mean(close,20))",
        "cs_rank(neg(ts_delta(close,2)))",
        "ts_corr(close,volume,10)",
        "mul(add(high,low),cs_zscore(volume))",
    ]

    @pytest.mark.parametrize(("left", "right"), itertools.combinations(SMALL, 2))
    def test_matches_recurrence(self, left, right):
        a, b = FactorExpr(left), FactorExpr(right)
        expected = forest_distance((as_tree(a.root),), (as_tree(b.root),))
        assert nted(a, b) == pytest.approx(expected / (a.size + b.size))
        assert nted(b, a) == pytest.approx(nted(a, b))
        assert 0.0 < nted(a, b) <= 1.0

    def test_distance_properties_on_generated_pairs(self):
        rng = np.random.default_rng(34)
        for _ in range(1000):
            a = canonicalize(FactorExpr(random_text(rng, 3)))
            b = canonicalize(FactorExpr(random_text(rng, 3)))
            distance = nted(a, b)
            assert distance == pytest.approx(nted(b, a))
            assert 0.0 <= distance <= 1.0
            assert (distance == 0.0) == (a == b)
            assert nted(a, a) == 0.0

    def test_identity(self):
        expr = FactorExpr("cs_rank(ts_corr(close,volume,10))")
        assert nted(expr, expr) == 0.0

    def test_phi_intra(self):
        library = [FactorExpr("close"), FactorExpr("volume"), FactorExpr("close")]
        assert phi_intra(library) == pytest.approx((0.5 + 0.0 + 0.5) / 3)

    def test_phi_intra_too_few(self):
        with pytest.raises(TooFewFactors):
            phi_intra([FactorExpr("close")])

    def test_phi_inter(self):
        library = [FactorExpr("ts_mean(close,7)"), FactorExpr("volume")]
        reference = [FactorExpr("ts_mean(close,20)"), FactorExpr("open")]
        assert phi_inter(library, reference) == pytest.approx((0.0 + 0.5) / 2)

    def test_phi_inter_empty(self):
        with pytest.raises(EmptyReference):
            phi_inter([FactorExpr("close")], [])
        with pytest.raises(TooFewFactors):
            phi_inter([], [FactorExpr("close")])

    def test_classical_set(self):
        reference = classical_set()
        assert len(reference) == 20
        assert FactorExpr("cs_rank(neg(pb))") in reference
        assert len(set(reference)) == len(reference)
