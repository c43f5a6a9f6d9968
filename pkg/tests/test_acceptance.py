"""End-to-end acceptance gate for the shipped guarantees.

Every test here covers one externally stated guarantee of the package:
the closed-form transfer models, optimizer agreement, interpreter
equivalence of the partition rewrites, quantization scaling, the kernel
memory inventory, clock-cost and utilization predictions, hierarchy
rewrites, and the monotonicity/fit properties of the cost curves.

Each test prints a single ``PASS``/``FAIL`` line (visible under
``pytest -s``) so the whole gate reads as a checklist.  Tolerances and
runtime budgets are asserted explicitly; nothing here may be loosened to
make a failing build pass.
"""

from __future__ import annotations

import functools
import time
from fractions import Fraction

import sympy

from weaveperf import diagram as dg
from weaveperf import hierarchy as hw
from weaveperf import library, oracle, resources, runner, streaming
from weaveperf import optimizer as opt
from weaveperf import pseudocode as pcm
from weaveperf import schedule as sc
from weaveperf._symbols import size_symbol

KB = 1024


def gate(label: str):
    """Print one PASS/FAIL line per acceptance check."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                out = fn(*args, **kwargs)
            except BaseException:
                print(f"FAIL  {label}")
                raise
            print(f"PASS  {label}")
            return out

        return wrapper

    return deco


def _symbolic_equal(got: sympy.Expr, expected: sympy.Expr) -> bool:
    return sympy.expand(got - expected) == 0


# ---------------------------------------------------------------------------
# closed-form transfer models


@gate("closed-form transfer models")
def test_closed_form_transfer_models():
    t0 = time.monotonic()
    a, b, c = (size_symbol(s) for s in "abc")
    q, x, d = (size_symbol(s) for s in "qxd")
    h, g = size_symbol("h"), size_symbol("g")

    mm = opt.closed_form("matmul")
    assert len(mm.terms) == 2
    assert _symbolic_equal(mm.terms[0][0], 2 * a * b * c)
    assert mm.terms[0][1] == Fraction(1, 2)
    assert _symbolic_equal(mm.terms[1][0], a * c)
    assert mm.terms[1][1] == Fraction(0)

    att = opt.closed_form("attention")
    assert len(att.terms) == 2
    assert _symbolic_equal(att.terms[0][0], 2 * q * d)
    assert att.terms[0][1] == Fraction(0)
    assert _symbolic_equal(att.terms[1][0], 4 * x * q * d**2)
    assert att.terms[1][1] == Fraction(1)

    mha = opt.closed_form("mha")
    assert len(mha.terms) == 2
    assert _symbolic_equal(mha.terms[0][0], h * 2 * q * d)
    assert _symbolic_equal(mha.terms[1][0], h * 4 * x * q * d**2)
    assert [t[1] for t in mha.terms] == [Fraction(0), Fraction(1)]

    gqa = opt.closed_form("gqa")
    assert len(gqa.terms) == 2
    assert _symbolic_equal(gqa.terms[0][0], g * 2 * q * d)
    assert _symbolic_equal(gqa.terms[1][0], g * 4 * x * q * d**2)
    assert [t[1] for t in gqa.terms] == [Fraction(0), Fraction(1)]

    elapsed = time.monotonic() - t0
    assert elapsed < 1.0, f"closed-form check took {elapsed:.2f}s (budget 1s)"


# ---------------------------------------------------------------------------
# optimizer agreement with the closed form


@gate("optimizer tracks closed form on size grid")
def test_optimizer_tracks_closed_form_on_size_grid():
    t0 = time.monotonic()
    worst = 0.0
    for a in (256, 512, 1024):
        for b in (256, 512, 1024):
            for c in (256, 512, 1024):
                d = library.canonical_matmul(a, b, c)
                cf = opt.closed_form("matmul", {"a": a, "b": b, "c": c})
                for m in (2**12, 2**14, 2**16):
                    plan = opt.optimize_groups(d, float(m))
                    h_cf = cf.evaluate(float(m))
                    assert plan.transfers >= h_cf - 1e-9, (
                        f"integer plan below closed form at "
                        f"a={a} b={b} c={c} M={m}: {plan.transfers} < {h_cf}"
                    )
                    rel = plan.transfers / h_cf - 1.0
                    worst = max(worst, rel)
                    assert rel <= 0.05, (
                        f"integer plan {rel:.2%} above closed form at "
                        f"a={a} b={b} c={c} M={m}"
                    )
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0, f"optimizer grid took {elapsed:.2f}s (budget 10s)"
    assert worst <= 0.05


# ---------------------------------------------------------------------------
# interpreter equivalence of the partition rewrites


@gate("partition rewrites agree with interpreter")
def test_partition_rewrites_agree_with_interpreter():
    t0 = time.monotonic()
    trials = 0

    def check(base: dg.Diagram, other: dg.Diagram, tol: float) -> None:
        nonlocal trials
        rep = oracle.equivalence_check(base, other, trials=7, seed=11, tol=tol)
        assert rep.passed, (
            f"{base.name}: worst relative error {rep.max_rel_err:g} "
            f"exceeds {tol:g}"
        )
        trials += rep.trials

    # matrix product: group either free axis, stream the contracted one
    for a, b, c in ((4, 6, 8), (8, 8, 8), (5, 7, 3)):
        base = library.canonical_matmul(a, b, c)
        for axis, size in (("a", a), ("c", c)):
            for g in sorted({2, size}):
                if size % g == 0:
                    check(base, dg.expand_groups(base, axis, g), 0.0)
        for s in (1, 3, b):
            check(base, streaming.expand(base, "b", s), 1e-6)

    # softmax-contraction: stream the reduced axis (ragged chunks allowed)
    for x, d in ((8, 3), (6, 5)):
        base = library.canonical_softmax_contraction(x, d)
        for s in (1, 3, x):
            check(base, streaming.expand(base, "x", s), 1e-6)

    # attention: group the query axis, stream the key/value axis
    for q, x, d in ((4, 6, 2), (6, 4, 4), (3, 5, 1)):
        base = library.canonical_attention(q, x, d)
        if q % 2 == 0:
            check(base, dg.expand_groups(base, "q", 2), 0.0)
        for s in (2, x):
            check(base, streaming.expand(base, "x", s), 1e-6)

    elapsed = time.monotonic() - t0
    assert trials >= 200, f"only {trials} seeded trials (need at least 200)"
    assert elapsed < 30.0, f"equivalence suite took {elapsed:.2f}s (budget 30s)"


# ---------------------------------------------------------------------------
# quantization scaling of the weighted transfer cost


@gate("quantization cost ratios")
def test_quantization_cost_ratios(h100):
    att = opt.closed_form("attention", {"q": 384, "x": 1024, "d": 128})
    dominant_att = opt.PerfModel(
        "attention dominant", (att.terms[1],), att.output_size
    )
    mm = opt.closed_form("matmul", {"a": 4096, "b": 4096, "c": 4096})
    dominant_mm = opt.PerfModel(
        "matmul dominant", (mm.terms[0],), mm.output_size
    )

    def ratio(model: opt.PerfModel) -> float:
        hi = hw.quantized_cost(model, h100, quant=4.0, output_restricted=True)
        lo = hw.quantized_cost(model, h100, quant=2.0, output_restricted=True)
        return hi / lo

    # memory-bound attention term: halving bytes per value wins exactly 4x
    assert ratio(dominant_att) == 4.0
    # large-matmul dominant term: the gain is 2**1.5 (about 2.83x)
    assert abs(ratio(dominant_mm) - 2**1.5) <= 1e-12


# ---------------------------------------------------------------------------
# kernel memory inventory (variable table and per-level budgets)

EXPECTED_VARIABLE_BYTES = {
    # symbol: (bytes, async double-buffered)
    "Q": (16 * KB, False),
    "K": (16 * KB, True),
    "V": (32 * KB, True),
    "S": (16 * KB, False),
    "P": (16 * KB, False),
    "P'": (16 * KB, False),
    "A": (8 * KB, False),
    "alpha": (768, False),
    "O'": (32 * KB, False),
    "D": (8 * KB, False),
    "dO": (8 * KB, False),
    "dO'": (2 * KB, False),
}


@gate("memory inventory tables")
def test_memory_inventory_tables(h100):
    t0 = time.monotonic()
    plan = pcm.attention_plan(catalog=h100)
    rows = pcm.variable_table(plan)
    by_sym = {r.symbol: r for r in rows}
    assert set(by_sym) == set(EXPECTED_VARIABLE_BYTES)
    for sym, (nbytes, doubled) in EXPECTED_VARIABLE_BYTES.items():
        r = by_sym[sym]
        got = r.bytes_tb if r.scope == "threadblock" else r.bytes_wg
        assert got == nbytes, f"{sym}: {got} bytes, expected {nbytes}"
        assert r.async_doubled == doubled, f"{sym}: async flag mismatch"

    tab = pcm.config_table(rows, h100)
    assert tab.n == 3 and tab.feasible
    smem = tab.budget("SMEM")
    regs = tab.budget("registers")
    # totals: 48 KB shared per threadblock, 48 KB shared per warpgroup,
    # 74.75 KB of registers per warpgroup
    assert smem.m_tb / KB == 48.0
    assert smem.m_wg / KB == 48.0
    assert regs.m_tb == 0 and regs.m_wg / KB == 74.75
    # warpgroup-count bounds and leftover capacity
    assert abs(smem.n_max - 3.7) <= 0.05
    assert abs(regs.n_max - 3.4) <= 0.05
    assert abs(smem.excess_tb / KB - 35.0) <= 0.01
    assert abs(smem.excess_wg / KB - 11.67) <= 0.01
    assert abs(regs.excess_tb / KB - 31.75) <= 0.01
    assert abs(regs.excess_wg / KB - 10.58) <= 0.01
    assert abs(regs.excess_thread - 85.0) <= 1.0
    elapsed = time.monotonic() - t0
    assert elapsed < 1.0, f"inventory tables took {elapsed:.2f}s (budget 1s)"


# ---------------------------------------------------------------------------
# per-thread clock costs of the pipeline blocks


@gate("per-thread clock costs")
def test_per_thread_clock_costs(plan_default, pipecat):
    costs = sc.column_costs(plan_default, pipecat)
    got = [c.clk_per_thread for c in costs]
    expected = [2.0, 4.06, 4.0, 0.5]
    assert len(got) == len(expected)
    for have, want in zip(got, expected):
        assert abs(have - want) <= 0.01, f"clk/thread {have} vs {want}"
    assert sc.tensor_lower_bound(costs) == 6.0


# ---------------------------------------------------------------------------
# bandwidth threshold and ideal throughput


@gate("bandwidth threshold and ideal throughput")
def test_bandwidth_threshold_and_ideal_throughput(plan_default, pipecat, h100):
    threshold = sc.bandwidth_threshold(plan_default, h100)
    assert abs(threshold - 295.0) <= 2.0, f"threshold {threshold:.2f}"
    costs = sc.column_costs(plan_default, pipecat)
    ideal = sc.ideal_throughput(costs, pipecat)
    assert abs(ideal - 1.32e15) <= 0.02e15, f"ideal throughput {ideal:.4g}"


# ---------------------------------------------------------------------------
# overlap utilization predictions


@gate("overlap utilization predictions")
def test_overlap_utilization_predictions(plan_fp16, plan_fp8, pipecat):
    fp16_intra = sc.utilization(
        sc.build_schedule(
            plan_fp16, pipecat, "intra-warpgroup", overheads={"sfu": 0.66}
        )
    )
    assert abs(fp16_intra.fraction - 0.75) <= 0.01, fp16_intra.fraction

    fp8_inter = sc.utilization(
        sc.build_schedule(
            plan_fp8, pipecat, "inter-warpgroup", overheads={"sfu": 0.66}
        )
    )
    assert abs(fp8_inter.fraction - 0.60) <= 0.01, fp8_inter.fraction

    # the fp8 single-warpgroup overlap leaves the special-function unit
    # idle at least a third of the time, with or without launch overhead
    for overheads in ({}, {"sfu": 0.66}):
        fp8_intra = sc.utilization(
            sc.build_schedule(
                plan_fp8, pipecat, "intra-warpgroup", overheads=overheads
            )
        )
        assert fp8_intra.idle["sfu"] >= 0.33, fp8_intra.idle


# ---------------------------------------------------------------------------
# hierarchy rewrites: pooled cache and cross-transfer links


@gate("hierarchy rewrites reduce to plain model")
def test_hierarchy_rewrites_reduce_to_plain_model(h800):
    cached = hw.Hierarchy(
        "cached",
        (
            hw.Level("l0", None, 1, "top"),
            hw.Level("lc", None, 1, "cache"),
            hw.Level("l1", 4096, 1, "plain"),
        ),
        (hw.Pipe("l0", "lc", 2e12), hw.Pipe("lc", "l1", 8e12)),
    )
    plain = hw.Hierarchy(
        "plain",
        (
            hw.Level("l0", None, 1, "top"),
            hw.Level("lc", 4096, 1, "plain"),
            hw.Level("l1", 4096, 1, "plain"),
        ),
        (hw.Pipe("l0", "lc", 2e12), hw.Pipe("lc", "l1", 8e12)),
    )
    model = opt.closed_form("attention", {"q": 64, "x": 256, "d": 16})
    cost_cached = hw.quantized_cost(
        model, cached, quant=2.0, output_restricted=True
    )
    cost_plain = hw.quantized_cost(model, plain, quant=2.0)
    assert cost_cached == cost_plain  # single-child cache is exact

    # sibling cross-transfers can only save cost, and a lone core saves zero
    big = opt.closed_form("attention", {"q": 384, "x": 1024, "d": 128})
    smem = h800.level("smem")
    link = h800.cross_link("cluster")
    table = hw.cluster_tradeoff(
        big,
        memory_c=float(smem.bytes),
        hinv_direct=h800.parent_pipe("smem").hinv,
        hinv_cross_by_n={n: 1.0 / bw for n, bw in link.bytes_per_s_by_n.items()},
        quant=1.0,
    )
    assert table.rows[0].n == 1 and table.rows[0].delta_cost == 0.0
    assert all(r.delta_cost >= 0.0 for r in table.rows)


# ---------------------------------------------------------------------------
# monotonicity of the optimized transfer cost and the power-law fit


@gate("transfer monotonicity and power-law fit")
def test_transfer_monotonicity_and_power_law_fit():
    for name in runner.list_diagrams():
        d = runner.load_diagram(name)

        # optimal transfers never increase as the memory budget grows
        grid = opt.sample_budget_grid(d, points=20)
        volumes = [opt.optimize_groups(d, m).transfers for m in grid]
        for prev, nxt in zip(volumes, volumes[1:]):
            assert nxt <= prev + 1e-9, f"{name}: transfers rose along the grid"

        # declaring a stream of size 1 never increases the transfer total
        base_total = float(resources.total_transfer(d))
        for axis in d.axis_sizes():
            cert = streaming.check_streamable(d, axis)
            if isinstance(cert, streaming.StreamabilityCertificate):
                streamed = dg.relabel_stream(d, axis, 1, cert)
                assert float(resources.total_transfer(streamed)) <= base_total

        # the idealized cost curve fits a sparse power law on snap exponents
        fit_grid = opt.sample_budget_grid(d, points=9, mode="idealized")
        samples = opt.sample_transfers(
            d, fit_grid, mode="idealized", relaxed=True
        )
        model = opt.extract_terms(samples, name=f"{name} fit")
        betas = {t[1] for t in model.terms}
        assert betas <= set(opt.SNAP_EXPONENTS), f"{name}: betas {betas}"
        for budget, volume in samples:
            predicted = sum(
                float(alpha) * budget ** (-float(beta))
                for alpha, beta in model.terms
            )
            assert abs(predicted / volume - 1.0) < 0.02, (
                f"{name}: fit misses sample at M={budget}"
            )
