from __future__ import annotations

import pytest

from weaveperf import library, oracle
from weaveperf import pseudocode as pcm
from weaveperf.pseudocode import (
    ATTENTION_DESCRIPTIONS,
    ATTENTION_NAMES,
    KB,
    ColumnAssign,
    Split,
    Stage,
)


def _loop_skeleton():
    cfg = dict(pcm.ATTENTION_DEFAULTS)
    d0 = library.canonical_attention(
        q=cfg["n_wg"] * cfg["w_q"], x=cfg["x_chunks"] * cfg["s_x"], d=cfg["d"]
    )
    base = pcm.expand_loop(
        d0,
        axis="x",
        s=cfg["s_x"],
        partition="q",
        partition_width=cfg["w_q"],
        names=ATTENTION_NAMES,
        descriptions=ATTENTION_DESCRIPTIONS,
    )
    return pcm.find_subloops(base, chunks={"x": cfg["u_x"]}), cfg


def _assignment(cfg):
    return [
        ColumnAssign("load Q", "SMEM", 1),
        ColumnAssign("load K", "SMEM", 1, async_load=True),
        ColumnAssign("load V", "SMEM", 2, async_load=True),
        ColumnAssign("compute S", "tensor-fragment", 2, pipeline="tensor_fp8"),
        ColumnAssign("exponent", "registers", 2, pipeline="sfu"),
        Stage("P'", "P", "SMEM", 2, ("g_q", "s_x")),
        Stage("P", "A", "SMEM", 1, ("w_q", "u_x")),
        Split("combine", "d", "d1", cfg["d1"]),
        ColumnAssign("combine", "tensor-fragment", 2, pipeline="tensor_fp16"),
        Stage("D", "dO", "SMEM", 2, ("g_q", "d1")),
        Stage("dO", "dO'", "registers", 2, ("t_q", "d2"), params={"d2": cfg["d2"]}),
        ColumnAssign("accumulate", "registers", 2, pipeline="fp16"),
        ColumnAssign("finalize", "registers", 2, pipeline="sfu"),
    ]


def test_variable_table_default_plan(plan_default, rows_default):
    by_sym = {r.symbol: r for r in rows_default}
    assert len(rows_default) == 12
    assert set(by_sym) == {
        "Q", "K", "V", "S", "P", "P'", "A", "D", "dO", "dO'", "O'", "alpha",
    }
    # threadblock-scope double-buffered async loads
    for sym, quant_name, tb in (("K", "FP8", 16 * KB), ("V", "FP16", 32 * KB)):
        r = by_sym[sym]
        assert r.scope == "threadblock"
        assert r.async_doubled
        assert r.quant_name == quant_name
        assert r.bytes_tb == tb
        assert r.bytes_wg == 0
    # per-warpgroup working set
    assert by_sym["Q"].bytes_wg == 16 * KB
    assert by_sym["O'"].bytes_wg == 32 * KB
    assert by_sym["S"].level == "registers"
    assert by_sym["A"].level == "SMEM" and by_sym["A"].bytes_wg == 8 * KB
    assert by_sym["alpha"].bytes_wg == 768  # three carried row statistics
    smem = sum(r.bytes_tb + r.bytes_wg for r in rows_default if r.level == "SMEM")
    assert smem == 49152 + 49152


def test_config_table_default_plan(h100, rows_default):
    tab = pcm.config_table(rows_default, h100)
    assert tab.n == 3
    assert tab.feasible
    assert tab.notes == ()
    smem = tab.budget("SMEM")
    regs = tab.budget("registers")
    assert smem.m_tb == 49152 and smem.m_wg == 49152
    assert regs.m_tb == 0 and regs.m_wg == 76544
    assert smem.n_max == pytest.approx(3.73, abs=0.05)
    assert regs.n_max == pytest.approx(3.42, abs=0.05)
    assert smem.excess_tb / KB == pytest.approx(35.0, abs=0.01)
    assert smem.excess_wg / KB == pytest.approx(11.67, abs=0.01)
    assert regs.excess_tb / KB == pytest.approx(31.75, abs=0.01)
    assert regs.excess_wg / KB == pytest.approx(10.58, abs=0.01)
    assert regs.excess_thread == pytest.approx(85, abs=1)
    with pytest.raises(pcm.PseudocodeError):
        tab.budget("L2")


def test_config_table_text_contains_both_tables(h100, rows_default):
    text = pcm.config_table(rows_default, h100).to_text()
    assert "N_max" in text
    assert "B/thread" in text
    assert "FP16" in text


def test_overcommitted_warpgroups_flagged(h100, rows_default):
    tab = pcm.config_table(rows_default, h100, n=4)
    assert not tab.feasible
    assert any("SMEM" in n and "exceed" in n for n in tab.notes)
    assert any("registers" in n for n in tab.notes)
    assert tab.budget("SMEM").excess_tb < 0


def test_excess_shrinks_as_warpgroups_added(h100, rows_default):
    ex = [
        pcm.config_table(rows_default, h100, n=n).budget("SMEM").excess_tb
        for n in (1, 2, 3, 4)
    ]
    assert ex == sorted(ex, reverse=True)


def test_spill_guard_note_near_register_limit(h100):
    plan = pcm.attention_plan({"d1": 64}, catalog=h100)
    tab = pcm.config_table(pcm.variable_table(plan), h100)
    assert tab.feasible  # fits, but barely
    assert tab.budget("registers").excess_thread < pcm.SPILL_GUARD_BYTES
    assert any("spills likely" in n for n in tab.notes)


def test_halving_chunk_width_halves_staged_operands(h100, plan_default):
    half = pcm.attention_plan({"u_x": 32}, catalog=h100)
    full_rows = {r.symbol: r for r in pcm.variable_table(plan_default)}
    half_rows = {r.symbol: r for r in pcm.variable_table(half)}
    assert half_rows["A"].bytes_wg == full_rows["A"].bytes_wg / 2
    assert half_rows["P'"].bytes_wg == full_rows["P'"].bytes_wg / 2


def test_divisor_violation_reports_lcm_and_sources(h100):
    with pytest.raises(pcm.DivisorError) as exc:
        pcm.attention_plan({"d": 100}, catalog=h100)
    e = exc.value
    assert e.axis == "d"
    assert e.required == 128
    assert e.actual == 100
    assert e.sources == (32, 64, 128)
    assert "lcm" in str(e)


def test_divisors_recorded_on_plan(plan_default):
    assert 128 in plan_default.divisors["d"]
    assert 128 in plan_default.divisors["w_q"]  # one full warpgroup per tile


def test_unknown_config_key_rejected(h100):
    with pytest.raises(pcm.PseudocodeError, match="unknown configuration key"):
        pcm.attention_plan({"bogus": 1}, catalog=h100)


def test_sections_and_subloops(plan_default):
    assert plan_default.section_of("load Q") == "prologue"
    assert plan_default.section_of("compute S") == "body"
    assert plan_default.in_subloop("combine")
    assert not plan_default.in_subloop("compute S")
    assert set(plan_default.splittable["combine"]) == {"g_q", "d", "s_x"}


def test_plan_without_catalog_keeps_thread_divisors():
    plan = pcm.attention_plan()
    rows = pcm.variable_table(plan)
    assert sum(r.bytes_wg for r in rows if r.level == "SMEM") == 49152


def test_unroll_reproduces_attention():
    plan = pcm.attention_plan(
        {"w_q": 128, "n_wg": 1, "s_x": 32, "u_x": 32, "x_chunks": 1}
    )
    ref = library.canonical_attention(128, 32, 128)
    rep = oracle.equivalence_check(pcm.unroll(plan), ref, trials=3, seed=3, tol=1e-6)
    assert rep.passed, rep.max_rel_err


def test_fragment_rejects_exponentials():
    base, cfg = _loop_skeleton()
    bad = _assignment(cfg)
    bad[4] = ColumnAssign("exponent", "tensor-fragment", 2, pipeline="sfu")
    with pytest.raises(pcm.FragmentOpError, match="cannot run on tensor"):
        pcm.assign_levels(base, bad)


def test_fragment_rejects_delta_rescale():
    base, cfg = _loop_skeleton()
    bad = _assignment(cfg)
    bad[11] = ColumnAssign("accumulate", "tensor-fragment", 2, pipeline="tensor_fp16")
    with pytest.raises(pcm.FragmentOpError, match="per-row scales"):
        pcm.assign_levels(base, bad)


def test_tensor_operand_must_be_staged_to_smem():
    base, cfg = _loop_skeleton()
    keep = [
        e
        for e in _assignment(cfg)
        if not (isinstance(e, Stage) and e.symbol in ("P", "A"))
    ]
    with pytest.raises(pcm.PipeError, match="staged copy"):
        pcm.assign_levels(base, keep)


def test_stage_moves_go_through_smem():
    base, cfg = _loop_skeleton()
    bad = _assignment(cfg)
    bad.insert(12, Stage("O'", "O2", "registers", 2, ("t_q", "d")))
    with pytest.raises(pcm.PipeError, match="through SMEM"):
        pcm.assign_levels(base, bad)


def test_split_requires_splittable_axis():
    base, cfg = _loop_skeleton()
    bad = _assignment(cfg)
    bad[7] = Split("combine", "q", "q1", 4)
    with pytest.raises(pcm.PseudocodeError, match="no splittable axis"):
        pcm.assign_levels(base, bad)


def test_plan_json_is_self_describing(plan_default):
    j = plan_default.to_json()
    assert {"params", "variables", "prologue", "body", "epilogue"} <= set(j)
    names = [c["name"] for c in j["body"]]
    assert "compute S" in names and "combine" in names
