from __future__ import annotations

import json
import math
import os
from fractions import Fraction

import pytest

from weaveperf import hierarchy as hw
from weaveperf import optimizer as opt


def _two_level(bw: float = 1e12, bytes_: int = 65536) -> hw.Hierarchy:
    return hw.Hierarchy(
        name="toy",
        levels=(
            hw.Level("l0", None, 1, "top"),
            hw.Level("l1", bytes_, 1, "plain"),
        ),
        pipes=(hw.Pipe("l0", "l1", bw),),
    )


def test_list_and_load_shipped_catalogs():
    names = hw.list_catalogs()
    assert "h100_sxm5_like" in names
    assert "h800_like" in names
    h = hw.load_catalog("h800_like")
    assert h.name == "h800_like"
    assert h.level("smem").bytes == 232448
    assert h.parent_pipe("smem").bytes_per_s == pytest.approx(2.04e12)
    link = h.cross_link("cluster")
    assert link is not None and link.bytes_per_s_by_n[2] == pytest.approx(3.27e12)
    with pytest.raises(hw.HierarchyError, match="no catalog"):
        hw.load_catalog("does_not_exist")


def test_catalog_env_dir_extends_search_path(tmp_path, monkeypatch):
    d1 = tmp_path / "one"
    d2 = tmp_path / "two"
    d1.mkdir()
    d2.mkdir()
    (d1 / "custom_a.json").write_text(json.dumps(_two_level().to_json()))
    (d2 / "custom_b.json").write_text(json.dumps(_two_level().to_json()))
    monkeypatch.setenv(hw.CATALOG_DIR_ENV, f"{d1}{os.pathsep}{d2}")
    names = hw.list_catalogs()
    assert "custom_a" in names and "custom_b" in names
    assert "h800_like" in names  # shipped data stays visible
    assert hw.load_catalog("custom_b").level("l1").bytes == 65536


def test_load_catalog_by_path(tmp_path):
    p = tmp_path / "mine.json"
    p.write_text(json.dumps(_two_level().to_json()))
    h = hw.load_catalog(str(p))
    assert h.name == "mine"


def test_hierarchy_validation_errors():
    top = hw.Level("l0", None, 1, "top")
    leaf = hw.Level("l1", 1024, 1, "plain")
    pipe = hw.Pipe("l0", "l1", 1e12)
    with pytest.raises(hw.HierarchyError, match="unlimited"):
        hw.Hierarchy("bad", (hw.Level("l0", 64, 1, "top"), leaf), (pipe,))
    with pytest.raises(hw.HierarchyError, match="no parent pipe"):
        hw.Hierarchy("bad", (top, leaf), ())
    with pytest.raises(hw.HierarchyError, match="unknown level"):
        hw.Hierarchy("bad", (top, leaf), (hw.Pipe("l0", "zz", 1e12),))
    with pytest.raises(hw.HierarchyError, match="needs a child"):
        hw.Hierarchy(
            "bad",
            (top, hw.Level("lc", 1024, 1, "cache")),
            (hw.Pipe("l0", "lc", 1e12),),
        )
    with pytest.raises(ValueError):
        hw.Level("x", 10, 1, "weird-role")


def test_json_roundtrip_preserves_catalog():
    h = hw.load_catalog("h800_like")
    back = hw.Hierarchy.from_json(h.to_json())
    assert back.levels == h.levels
    assert back.pipes == h.pipes
    assert back.clock_hz == h.clock_hz
    assert back.cross[0].bytes_per_s_by_n == h.cross[0].bytes_per_s_by_n


def test_cache_rewrite_requires_output_restricted_flag(h100):
    with pytest.raises(hw.HierarchyError, match="output_restricted"):
        hw.effective_levels(h100)
    levels = hw.effective_levels(h100, output_restricted=True)
    by_id = {l.id: l for l in levels}
    assert by_id["gmem"].hinv == 0.0
    assert by_id["l2"].role == "cache"
    assert by_id["l2"].memory == 132 * 232448  # pooled across children
    assert by_id["smem"].memory == 232448
    assert by_id["rmem"].hinv == pytest.approx(1 / 6.4e13)


def test_cross_transfer_rewrite_h800(h800):
    levels = hw.effective_levels(h800, output_restricted=True)
    by_id = {l.id: l for l in levels}
    hinv_direct = 1 / 2.04e12
    hinv_cross = 1 / 3.27e12
    assert by_id["cluster"].hinv == pytest.approx(hinv_direct - hinv_cross)
    assert by_id["cluster"].memory == 2 * 232448
    assert by_id["smem"].hinv == pytest.approx(hinv_cross)


def test_slow_sibling_path_warns():
    doc = hw.load_catalog("h800_like").to_json()
    doc["cross"][0]["bytes_per_s_by_n"] = {"2": 1.0e12}  # slower than direct
    h = hw.Hierarchy.from_json(doc)
    with pytest.warns(hw.CrossTransferWarning):
        levels = hw.effective_levels(h, output_restricted=True)
    by_id = {l.id: l for l in levels}
    assert by_id["cluster"].hinv < 0


def test_quant_scaling_ratio_linear_term():
    """Halving bytes per value cuts a bandwidth-bound term by exactly 4x."""
    model = opt.PerfModel("t", ((1000.0, Fraction(1)),))
    h = _two_level()
    ratio = hw.quantized_cost(model, h, quant=2.0) / hw.quantized_cost(model, h, quant=1.0)
    assert ratio == pytest.approx(4.0, abs=1e-12)


def test_quant_scaling_ratio_sqrt_term():
    model = opt.PerfModel("t", ((1000.0, Fraction(1, 2)),))
    h = _two_level()
    ratio = hw.quantized_cost(model, h, quant=2.0) / hw.quantized_cost(model, h, quant=1.0)
    assert ratio == pytest.approx(2.0**1.5, abs=1e-12)


def test_quantized_cost_rejects_bad_quant():
    with pytest.raises(hw.HierarchyError):
        hw.quantized_cost(opt.PerfModel("t", ()), _two_level(), quant=0.0)


def test_cache_with_single_child_matches_plain_level():
    """With one child the pooled-cache rewrite is no approximation at all."""
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
    a = hw.quantized_cost(model, cached, quant=2.0, output_restricted=True)
    b = hw.quantized_cost(model, plain, quant=2.0)
    assert a == pytest.approx(b, rel=1e-12)


def test_cost_breakdown_matches_total_and_notes(h100):
    model = opt.closed_form("attention", {"q": 384, "x": 1024, "d": 128})
    bd = hw.cost_breakdown(model, h100, quant=2.0, output_restricted=True)
    assert bd["model"] == "attention"
    assert bd["catalog"] == "h100_sxm5_like"
    total = hw.quantized_cost(model, h100, quant=2.0, output_restricted=True)
    assert bd["total_seconds"] == pytest.approx(total, rel=1e-9)
    assert bd["total_seconds"] == pytest.approx(
        sum(r["seconds"] for r in bd["levels"]), rel=1e-12
    )
    # smem/rmem hold far fewer than 64 outputs at this size
    assert any("tile-fitting" in n for n in bd["notes"])


def test_cluster_tradeoff_h800_prefers_pairs(h800):
    model = opt.closed_form("attention", {"q": 384, "x": 1024, "d": 128})
    smem = h800.level("smem")
    link = h800.cross_link("cluster")
    table = hw.cluster_tradeoff(
        model,
        memory_c=float(smem.bytes),
        hinv_direct=h800.parent_pipe("smem").hinv,
        hinv_cross_by_n={n: 1.0 / bw for n, bw in link.bytes_per_s_by_n.items()},
        quant=1.0,
    )
    assert [r.n for r in table.rows] == [1, 2, 4]
    assert table.rows[0].delta_cost == 0.0  # no clustering, no saving
    assert all(r.delta_cost >= 0.0 for r in table.rows)
    assert table.best_n == 2
    j = table.to_json()
    assert j["best_n"] == 2 and len(j["rows"]) == 3


def test_cluster_tradeoff_validates_memory():
    with pytest.raises(hw.HierarchyError):
        hw.cluster_tradeoff(opt.PerfModel("t", ()), 0.0, 1e-12, {2: 1e-13})


def test_number_restriction_check(h100):
    ok = hw.number_restriction_check(
        h100, "smem", "l2", {"a": 64, "c": 32}, {"a": 256, "c": 128}
    )
    assert ok.ratio == pytest.approx(16.0)
    assert ok.limit == 132
    assert ok.passed
    bad = hw.number_restriction_check(
        h100, "smem", "l2", {"a": 8, "c": 8}, {"a": 512, "c": 512}
    )
    assert not bad.passed
    with pytest.raises(hw.HierarchyError):
        hw.number_restriction_check(h100, "smem", "l2", {"a": 1}, {"b": 1})
    with pytest.raises(hw.HierarchyError):
        hw.number_restriction_check(h100, "smem", "l2", {"a": 0}, {"a": 4})


def test_distributed_top_requires_both_flags():
    doc = {
        "name": "dist",
        "levels": [
            {"id": "net", "bytes": None, "n_max": 1, "role": "cross-transfer"},
            {"id": "node", "bytes": 1 << 30, "n_max": 4, "role": "plain"},
        ],
        "pipes": [{"from": "net", "to": "node", "bytes_per_s": 1e11}],
        "cross": [{"level": "net", "bytes_per_s_by_n": {"4": 4e11}}],
    }
    h = hw.Hierarchy.from_json(doc)
    with pytest.raises(hw.HierarchyError, match="allow_distributed_top"):
        hw.effective_levels(h, output_restricted=True)
    levels = hw.effective_levels(
        h, output_restricted=True, allow_distributed_top=True
    )
    assert levels[0].hinv == pytest.approx(-1 / 4e11)
    assert levels[0].memory == 4 * (1 << 30)
    assert levels[1].hinv == pytest.approx(1 / 4e11)
    assert math.isinf(hw.effective_levels(
        hw.Hierarchy.from_json({**doc, "levels": [doc["levels"][0] | {}, doc["levels"][1] | {"n_max": 1}]}),
        output_restricted=True,
        allow_distributed_top=True,
    )[0].memory)
