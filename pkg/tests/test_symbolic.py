import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import polynomials
from hkpoho.symbolic import (
    ZERO,
    EvaluationSingularity,
    ParseError,
    UnboundVariable,
    abs_power,
    const,
    cos,
    differentiate,
    evaluate,
    evaluate_array,
    exp,
    is_zero,
    log,
    parse,
    power,
    sin,
    substitute,
    to_prefix,
    var,
)

x1, x2, z, p1, p2 = (var(v) for v in ("x1", "x2", "z", "p1", "p2"))


def test_power_rule():
    assert differentiate(x1**2 * x2, "x1") == 2 * x1 * x2
    assert to_prefix(differentiate(x1**2 * x2, "x1")) == "(* 2 x1 x2)"


def test_product_rule_with_g_prime():
    G = z**4
    assert differentiate(z * differentiate(G, "z"), "z") == 16 * z**3


def test_abs_power_derivative_matches_finite_difference():
    f = abs_power([p1, p2], 3) / 3
    exact = evaluate(differentiate(f, "p1"), {"p1": 1, "p2": 0})
    h = 1e-5
    fd = (evaluate(f, {"p1": 1 + h, "p2": 0}) - evaluate(f, {"p1": 1 - h, "p2": 0})) / (2 * h)
    assert exact == pytest.approx(1.0, abs=1e-15)
    assert fd == pytest.approx(exact, abs=1e-9)


def test_abs_power_needs_k_above_one():
    with pytest.raises(ValueError):
        abs_power([p1, p2], 1)


def test_abs_power_singular_at_origin_for_small_k():
    g = differentiate(abs_power([p1, p2], Fraction(3, 2)), "p1")
    with pytest.raises(EvaluationSingularity):
        evaluate(g, {"p1": 0, "p2": 0})
    # k = 2 collapses to a polynomial and is regular everywhere
    assert differentiate(abs_power([p1, p2], 2), "p1") == 2 * p1


def test_evaluate_examples():
    assert evaluate(x1**2 + x2**2, {"x1": 3, "x2": 4}) == 25.0
    assert evaluate(sin(x1), {"x1": 0}) == 0.0
    assert evaluate(x1**2 / math.factorial(2), {"x1": 2}) == 2.0


def test_polynomial_evaluation_is_exact_then_rounded():
    e = parse("(+ (* 1/3 x1) (* 1/3 x1) (* 1/3 x1))")
    assert evaluate(e, {"x1": Fraction(1, 10)}) == 0.1


def test_evaluation_errors():
    with pytest.raises(UnboundVariable):
        evaluate(x1 + x2, {"x1": 1})
    with pytest.raises(EvaluationSingularity):
        evaluate(log(x1), {"x1": 0})
    with pytest.raises(EvaluationSingularity):
        evaluate(power(x1, Fraction(1, 2)), {"x1": -1})


def test_evaluate_array_reports_first_singular_index():
    with pytest.raises(EvaluationSingularity) as info:
        evaluate_array(log(x1), {"x1": np.array([1.0, 2.0, -1.0, 0.0])})
    assert info.value.index == 2
    vals = evaluate_array(log(x1), {"x1": np.array([1.0, -1.0])}, strict=False)
    assert vals[0] == 0.0 and np.isnan(vals[1])


def test_is_zero_examples():
    assert is_zero(x1 * x2 - x2 * x1)
    assert is_zero(sin(x1) ** 2 + cos(x1) ** 2 - 1)
    assert not is_zero(sin(x1) - x1)
    assert (x1 + x2) - (x2 + x1) == ZERO


def test_elementary_values_at_special_points_are_exact():
    assert sin(const(0)) == ZERO
    assert cos(const(0)) == const(1)
    assert exp(const(0)) == const(1)
    assert log(const(1)) == ZERO


def test_prefix_grammar():
    e = parse("(+ (* 2 (^ x1 2)) (sin x2))")
    assert e == 2 * x1**2 + sin(x2)
    assert to_prefix(parse("(* 3/4 x1)")) == "(* 3/4 x1)"
    assert parse("(abspow 3 p1 p2)") == abs_power([p1, p2], 3)
    assert parse("(- x1)") == -x1
    assert parse("(/ x1 2)") == x1 / 2


@pytest.mark.parametrize("bad", ["(+ x1", "(foo x1)", "(+ x1) x2", ")", "(^ x1 x2)"])
def test_parse_errors(bad):
    with pytest.raises(ParseError):
        parse(bad)


def test_graded_lex_display_order():
    e = parse("(+ x1 (^ x2 3) 1 (* x1 x2))")
    assert to_prefix(e) == "(+ (^ x2 3) (* x1 x2) x1 1)"


@given(polynomials(), polynomials())
@settings(max_examples=60, deadline=None)
def test_leibniz_rule(f, g):
    for v in ("x1", "x2"):
        assert differentiate(f * g, v) == differentiate(f, v) * g + f * differentiate(g, v)


@given(polynomials(), polynomials(), st.fractions(-3, 3, max_denominator=5))
@settings(max_examples=60, deadline=None)
def test_differentiation_is_linear(f, g, c):
    assert differentiate(c * f + g, "x1") == c * differentiate(f, "x1") + differentiate(g, "x1")


@given(polynomials())
@settings(max_examples=60, deadline=None)
def test_canonical_round_trip(f):
    once = parse(to_prefix(f))
    assert once == f
    assert to_prefix(parse(to_prefix(once))) == to_prefix(once)
    assert is_zero(f - f)


@given(polynomials())
@settings(max_examples=40, deadline=None)
def test_mixed_partials_commute(f):
    assert differentiate(differentiate(f, "x1"), "x2") == differentiate(differentiate(f, "x2"), "x1")


@given(polynomials(), polynomials())
@settings(max_examples=40, deadline=None)
def test_substitution_agrees_with_evaluation(f, g):
    point = {"x1": Fraction(1, 3), "x2": Fraction(-2, 5)}
    inner = evaluate(g, point)
    composed = substitute(f, {"x1": g})
    assert evaluate(composed, point) == pytest.approx(evaluate(f, {"x1": inner, "x2": point["x2"]}), rel=1e-12, abs=1e-12)


FD_SUITE = [
    "(+ (* x1 (sin x2)) (exp (* 1/2 x1)))",
    "(* (cos (* x1 x2)) (^ x1 3))",
    "(+ (log (+ 2 (^ x1 2))) (* x2 (exp x2)))",
    "(abspow 5/2 x1 x2)",
]


@pytest.mark.parametrize("text", FD_SUITE)
def test_finite_difference_error_is_second_order(text):
    e = parse(text)
    point = {"x1": 0.7, "x2": -0.4}
    exact = evaluate(differentiate(e, "x1"), point)
    errors = []
    for h in (1e-2, 1e-3, 1e-4):
        fd = (evaluate(e, {**point, "x1": 0.7 + h}) - evaluate(e, {**point, "x1": 0.7 - h})) / (2 * h)
        errors.append(abs(fd - exact))
        assert abs(fd - exact) <= 10 * h * h * (1 + abs(exact))
    assert errors[1] < errors[0]


def test_fractional_power_of_cancelled_square():
    # the expanded square a^2 - 2ab + b^2 comes out slightly negative here
    a, b = var("x1"), var("x2")
    e = power((a - b) ** 2, Fraction(3, 2))
    env = {"x1": np.array([0.04097352393619469]), "x2": np.array([0.04097352393619468])}
    assert evaluate_array((a - b) ** 2, env)[0] < 0
    assert evaluate_array(e, env)[0] == 0.0
    assert evaluate(e, {"x1": 0.04097352393619469, "x2": 0.04097352393619468}) == 0.0
    with pytest.raises(EvaluationSingularity):
        evaluate_array(power(a - 1, Fraction(1, 2)), {"x1": np.array([0.5])})
