from __future__ import annotations

from fractions import Fraction

import pytest
import sympy

from weaveperf import library, optimizer as opt
from weaveperf._symbols import size_symbol


M = size_symbol("M")


def test_closed_form_matmul_expression():
    model = opt.closed_form("matmul")
    a, b, c = (size_symbol(n) for n in "abc")
    want = 2 * a * b * c * M ** sympy.Rational(-1, 2) + a * c
    assert sympy.simplify(model.transfers() - want) == 0
    assert model.output_size == a * c


def test_closed_form_attention_families_scale():
    att = opt.closed_form("attention")
    mha = opt.closed_form("mha")
    gqa = opt.closed_form("gqa")
    h, g = size_symbol("h"), size_symbol("g")
    assert sympy.simplify(mha.transfers() - h * att.transfers()) == 0
    assert sympy.simplify(gqa.transfers() - g * att.transfers()) == 0
    q, d = size_symbol("q"), size_symbol("d")
    assert att.output_size == q * d
    assert mha.output_size == h * q * d


def test_closed_form_with_concrete_sizes():
    model = opt.closed_form("matmul", {"a": 64, "b": 64, "c": 64})
    assert model.evaluate(4096.0) == pytest.approx(2 * 64**3 / 64 + 64 * 64)
    with pytest.raises(opt.OptimizeError):
        opt.closed_form("matmul", {"zz": 3})
    with pytest.raises(opt.OptimizeError):
        opt.closed_form("convolution")


def test_perfmodel_json_roundtrip_symbolic():
    model = opt.closed_form("mha")
    back = opt.PerfModel.from_json(model.to_json())
    assert sympy.simplify(back.transfers() - model.transfers()) == 0
    assert back.output_size == model.output_size
    bind = {"h": 4, "q": 8, "x": 16, "d": 4}
    assert back.evaluate(512.0, bind) == pytest.approx(model.evaluate(512.0, bind))


def test_perfmodel_rejects_growing_terms():
    with pytest.raises(opt.OptimizeError, match="exponents"):
        opt.PerfModel("bad", ((sympy.Integer(3), Fraction(-1, 2)),))


def test_arithmetic_intensity_attention():
    q, x, d = (size_symbol(n) for n in "qxd")
    model = opt.closed_form("attention")
    ratio = opt.arithmetic_intensity(model, 4 * q * x * d, memory=None)
    num = ratio.subs({q: 3, x: 5, d: 2, M: 100})
    direct = model.transfers(100).subs({q: 3, x: 5, d: 2}) / (4 * 3 * 5 * 2)
    assert sympy.simplify(num - direct) == 0


def test_optimize_matmul_square_tiles():
    d = library.canonical_matmul(64, 64, 64)
    plan = opt.optimize_groups(d, 4096.0)
    assert set(plan.groups) == {"a", "c"}
    assert plan.streamed == ("b",)
    assert plan.groups["a"] == plan.groups["c"]  # symmetric problem
    assert plan.footprint <= 4096.0 + 1e-9
    bound = opt.closed_form("matmul", {"a": 64, "b": 64, "c": 64}).evaluate(4096.0)
    assert plan.transfers >= bound * (1 - 1e-9)
    assert plan.transfers_relaxed <= plan.transfers + 1e-9
    j = plan.to_json()
    assert j["groups"] == plan.groups
    assert j["diagram"] == "matmul"


def test_optimize_attention_groups_queries():
    d = library.canonical_attention(64, 128, 8)
    plan = opt.optimize_groups(d, 8192.0)
    assert "q" in plan.groups
    assert "x" in plan.streamed
    assert plan.footprint <= 8192.0 + 1e-9


def test_optimize_huge_budget_reaches_full_groups():
    d = library.canonical_matmul(16, 16, 16)
    plan = opt.optimize_groups(d, 10**9)
    assert plan.groups == {"a": 16, "c": 16}


def test_optimize_infeasible_budget():
    d = library.canonical_matmul(64, 64, 64)
    with pytest.raises(opt.InfeasibleError) as exc:
        opt.optimize_groups(d, 2.0)
    assert exc.value.budget == 2.0
    assert exc.value.minimum == pytest.approx(3.0)  # one element per operand
    assert exc.value.level == "l1"


def test_optimize_validates_inputs():
    d = library.canonical_matmul(8, 8, 8)
    with pytest.raises(opt.OptimizeError):
        opt.optimize_groups(d, 1024.0, mode="sloppy")
    with pytest.raises(opt.OptimizeError):
        opt.optimize_groups(d, 0.0)
    with pytest.raises(opt.OptimizeError):
        opt.optimize_groups(library.canonical_matmul("a", 8, 8), 1024.0)


def test_budget_grid_sits_inside_window():
    d = library.canonical_matmul(64, 64, 64)
    lo, hi = opt.budget_range(d)
    grid = opt.sample_budget_grid(d, points=7)
    assert len(grid) == 7
    assert grid == sorted(grid)
    assert grid[0] >= lo
    assert grid[-1] <= hi


def test_transfers_decrease_with_budget():
    d = library.canonical_matmul(64, 64, 64)
    grid = opt.sample_budget_grid(d, points=6)
    hs = [h for _, h in opt.sample_transfers(d, grid, relaxed=True)]
    assert all(a >= b - 1e-9 for a, b in zip(hs, hs[1:]))


def test_extract_terms_recovers_matmul_law():
    sizes = {"a": 256, "b": 256, "c": 256}
    truth = opt.closed_form("matmul", sizes)
    grid = [2.0**k for k in range(8, 17)]
    samples = [(m, truth.evaluate(m)) for m in grid]
    fit = opt.extract_terms(samples, output_size=256 * 256)
    assert {b for _, b in fit.terms} == {Fraction(1, 2), Fraction(0)}
    for alpha, beta in fit.terms:
        want = 2 * 256**3 if beta == Fraction(1, 2) else 256 * 256
        assert float(alpha) == pytest.approx(want, rel=0.02)


def test_extract_terms_from_optimized_samples():
    d = library.canonical_matmul(64, 64, 64)
    grid = opt.sample_budget_grid(d, points=9)
    samples = opt.sample_transfers(d, grid, relaxed=True)
    fit = opt.extract_terms(samples, tolerance=0.05)
    assert all(b in opt.SNAP_EXPONENTS for _, b in fit.terms)
    for m, h in samples:
        assert fit.evaluate(m) == pytest.approx(h, rel=0.05)


def test_extract_terms_error_paths():
    with pytest.raises(opt.FitError):
        opt.extract_terms([(64.0, 100.0)])
    sawtooth = [(2.0**k, 300.0 if k % 2 else 100.0) for k in range(4, 12)]
    with pytest.raises(opt.FitError):
        opt.extract_terms(sawtooth)
    with pytest.raises(opt.OptimizeError):
        opt.extract_terms([(64.0, 10.0), (64.0, 9.0)])
