"""Size expressions and assumption-guided comparisons.

Axis sizes, group sizes and stream sizes may be concrete integers or named
parameters.  Internally everything is a sympy expression over positive integer
symbols, so resource quantities come out as polynomials that can be compared,
simplified and concretized on demand.

Comparisons between polynomial sizes (needed to resolve ``max`` over columns)
are decided by a sound but incomplete rule: a difference is provably
nonnegative if, after rewriting declared assumptions such as ``x >= d`` into
slack form and shifting every size symbol by its minimum of 1, the expanded
polynomial has no negative coefficient.  Anything the rule cannot decide is
reported as unresolved rather than guessed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, TypeAlias, Union

import sympy

SizeLike: TypeAlias = Union[int, str, Fraction, sympy.Expr]

_symbol_cache: dict[str, sympy.Symbol] = {}


def size_symbol(name: str) -> sympy.Symbol:
    """A positive integer symbol, cached so equal names compare equal."""
    sym = _symbol_cache.get(name)
    if sym is None:
        sym = sympy.Symbol(name, positive=True, integer=True)
        _symbol_cache[name] = sym
    return sym


def to_expr(size: SizeLike) -> sympy.Expr:
    if isinstance(size, sympy.Expr):
        return size
    if isinstance(size, bool):
        raise ValueError(f"size may not be a bool: {size!r}")
    if isinstance(size, int):
        if size < 0:
            raise ValueError(f"size must be nonnegative, got {size}")
        return sympy.Integer(size)
    if isinstance(size, Fraction):
        return sympy.Rational(size.numerator, size.denominator)
    if isinstance(size, str):
        if not size.isidentifier():
            raise ValueError(f"size parameter must be an identifier, got {size!r}")
        return size_symbol(size)
    raise TypeError(f"unsupported size {size!r} of type {type(size).__name__}")


def free_params(expr: SizeLike) -> frozenset[str]:
    return frozenset(str(s) for s in to_expr(expr).free_symbols)


def evaluate(expr: SizeLike, bindings: Mapping[str, SizeLike] | None = None) -> sympy.Expr:
    """Substitute bindings; returns a (possibly still symbolic) expression."""
    e = to_expr(expr)
    if bindings:
        subs = {size_symbol(k): to_expr(v) for k, v in bindings.items()}
        e = e.xreplace(subs)
    return e


def as_int(expr: SizeLike, bindings: Mapping[str, SizeLike] | None = None) -> int:
    e = evaluate(expr, bindings)
    if not e.is_Integer:
        raise ValueError(f"expected a concrete integer, got {e}")
    return int(e)


def as_float(expr: SizeLike, bindings: Mapping[str, SizeLike] | None = None) -> float:
    e = evaluate(expr, bindings)
    if e.free_symbols:
        raise ValueError(f"expected a concrete number, got {e}")
    return float(e)


@dataclass(frozen=True)
class Assumption:
    """Declared ordering between sizes, e.g. ``x >= d`` or ``x > d``.

    The left side must be a single parameter name so the assumption can be
    eliminated by substitution (lhs -> rhs + slack).
    """

    lhs: str
    rhs: sympy.Expr
    strict: bool = False

    @staticmethod
    def parse(text: str) -> "Assumption":
        for op, strict in ((">=", False), (">", True)):
            if op in text:
                left, right = text.split(op, 1)
                left = left.strip()
                if not left.isidentifier():
                    raise ValueError(
                        f"assumption left side must be a parameter name: {text!r}"
                    )
                rhs = sympy.sympify(right.strip(), locals=dict(_symbol_cache))
                rhs = rhs.xreplace(
                    {s: size_symbol(str(s)) for s in rhs.free_symbols}
                )
                return Assumption(left, rhs, strict)
        raise ValueError(f"assumption must use '>' or '>=': {text!r}")

    def __str__(self) -> str:
        op = ">" if self.strict else ">="
        return f"{self.lhs} {op} {self.rhs}"


def parse_assumptions(texts: Iterable[str | Assumption]) -> tuple[Assumption, ...]:
    out = []
    for t in texts:
        out.append(t if isinstance(t, Assumption) else Assumption.parse(t))
    return tuple(out)


def is_nonneg(expr: SizeLike, assumptions: Iterable[Assumption] = ()) -> bool:
    """True if the rule can prove expr >= 0 for all admissible sizes."""
    e = sympy.expand(to_expr(expr))
    for i, a in enumerate(assumptions):
        slack = sympy.Symbol(f"_slack{i}", nonnegative=True)
        base = a.rhs + slack + (1 if a.strict else 0)
        e = sympy.expand(e.xreplace({size_symbol(a.lhs): base}))
    shift = {
        s: sympy.Symbol(f"_sh_{s}", nonnegative=True) + 1
        for s in e.free_symbols
        if not str(s).startswith("_slack")
    }
    e = sympy.expand(e.xreplace(shift))
    if e.is_number:
        return bool(e >= 0)
    poly = e.as_poly(*sorted(e.free_symbols, key=str))
    if poly is None:
        return False
    return all(c >= 0 for c in poly.coeffs())


def dominates(a: SizeLike, b: SizeLike, assumptions: Iterable[Assumption] = ()) -> bool:
    """True if a >= b is provable."""
    return is_nonneg(to_expr(a) - to_expr(b), assumptions)


def symbolic_max(
    exprs: Iterable[SizeLike], assumptions: Iterable[Assumption] = ()
) -> tuple[sympy.Expr, bool]:
    """Maximum of the expressions.

    Returns ``(expr, resolved)``.  When pairwise domination leaves a single
    candidate the result is that polynomial and ``resolved`` is True;
    otherwise a sympy ``Max`` over the undominated candidates is returned and
    ``resolved`` is False.
    """
    items = [sympy.expand(to_expr(e)) for e in exprs]
    if not items:
        return sympy.Integer(0), True
    survivors: list[sympy.Expr] = []
    for cand in items:
        if any(cand == s for s in survivors):
            continue
        if any(dominates(s, cand, assumptions) for s in survivors):
            continue
        survivors = [s for s in survivors if not dominates(cand, s, assumptions)]
        survivors.append(cand)
    if len(survivors) == 1:
        return survivors[0], True
    return sympy.Max(*survivors), False


def expr_to_json(expr: SizeLike):
    """Plain int when concrete, otherwise the canonical string form."""
    e = to_expr(expr)
    if e.is_Integer:
        return int(e)
    return str(e)


def expr_from_json(value: SizeLike) -> sympy.Expr:
    """Inverse of :func:`expr_to_json`: numbers pass through, expression
    strings are parsed with all free symbols treated as sizes."""
    if isinstance(value, str) and not value.isidentifier():
        try:
            e = sympy.sympify(value, locals=dict(_symbol_cache))
        except (sympy.SympifyError, SyntaxError, TypeError) as exc:
            raise ValueError(f"not a size expression: {value!r}") from exc
        return e.xreplace({s: size_symbol(str(s)) for s in e.free_symbols})
    return to_expr(value)
