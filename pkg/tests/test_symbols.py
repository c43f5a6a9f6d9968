from __future__ import annotations

import pytest
import sympy
from hypothesis import given
from hypothesis import strategies as st

from weaveperf._symbols import (
    Assumption,
    as_int,
    dominates,
    evaluate,
    expr_from_json,
    expr_to_json,
    free_params,
    is_nonneg,
    parse_assumptions,
    size_symbol,
    symbolic_max,
    to_expr,
)


def test_to_expr_accepts_ints_strings_and_exprs():
    assert to_expr(3) == sympy.Integer(3)
    assert to_expr("a") == size_symbol("a")
    e = size_symbol("a") * 2
    assert to_expr(e) is e


def test_evaluate_substitutes_bindings():
    e = to_expr("a") * to_expr("b") + 1
    assert evaluate(e, {"a": 3, "b": 4}) == 13
    assert as_int(e, {"a": 3, "b": 4}) == 13


def test_as_int_rejects_unbound_symbols():
    with pytest.raises(ValueError):
        as_int(to_expr("a"))


def test_free_params():
    e = to_expr("a") * to_expr("b") + 2
    assert free_params(e) == frozenset({"a", "b"})
    assert free_params(5) == frozenset()


def test_assumption_parse_strict_and_weak():
    a = Assumption.parse("x > d")
    assert a.lhs == "x" and a.strict
    b = Assumption.parse("x >= 2*d")
    assert not b.strict
    assert b.rhs == 2 * size_symbol("d")


def test_assumption_parse_rejects_bad_forms():
    with pytest.raises(ValueError):
        Assumption.parse("x = d")
    with pytest.raises(ValueError):
        Assumption.parse("x+y > d")


def test_is_nonneg_with_assumption():
    x, d = size_symbol("x"), size_symbol("d")
    assert is_nonneg(x - 1)
    assert not is_nonneg(x - d)
    assert is_nonneg(x - d, parse_assumptions(["x>=d"]))


def test_dominates_orders_products():
    x, d = size_symbol("x"), size_symbol("d")
    assert dominates(x * d, x)
    assert not dominates(x, x * d)


def test_symbolic_max_resolves_under_assumptions():
    x, d = size_symbol("x"), size_symbol("d")
    expr, resolved = symbolic_max([x, d], parse_assumptions(["x>=d"]))
    assert resolved and expr == x
    expr, resolved = symbolic_max([x, d], ())
    assert not resolved


def test_expr_to_json_round_trips():
    e = 2 * size_symbol("a") * size_symbol("b")
    j = expr_to_json(e)
    assert isinstance(j, str)
    assert expr_from_json(j) == e
    assert expr_from_json(expr_to_json(7)) == 7
    with pytest.raises(ValueError):
        expr_from_json("2*(a")


@given(st.integers(1, 50), st.integers(1, 50))
def test_evaluate_matches_python_arithmetic(a: int, b: int):
    e = to_expr("a") ** 2 + 3 * to_expr("b")
    assert as_int(e, {"a": a, "b": b}) == a * a + 3 * b
