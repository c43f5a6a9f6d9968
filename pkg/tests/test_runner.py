from __future__ import annotations

import json

import pytest

from weaveperf import diagram as dg
from weaveperf import library, runner


def test_shipped_diagram_names():
    assert runner.list_diagrams() == ["attention", "gqa", "matmul", "mha"]


def test_analyze_shipped_attention():
    out = runner.run("analyze", {"diagram": "attention"})
    assert out["command"] == "analyze"
    assert out["diagram"] == "attention"
    assert out["report"]["total_transfer"] > 0
    assert "resource report" in out["text"]


def test_analyze_inline_symbolic_with_bindings():
    doc = dg.diagram_to_json(library.canonical_matmul("a", "b", "c"))
    out = runner.run(
        "analyze", {"diagram": doc, "bindings": {"a": 4, "b": 5, "c": 6}}
    )
    assert out["report"]["total_transfer"] == 4 * 5 + 5 * 6 + 4 * 6


def test_analyze_from_file_and_io_errors(tmp_path):
    p = tmp_path / "mm.json"
    p.write_text(json.dumps(dg.diagram_to_json(library.canonical_matmul(4, 5, 6))))
    out = runner.run("analyze", {"diagram": str(p)})
    assert out["report"]["flops"] == 2 * 4 * 5 * 6

    with pytest.raises(runner.RunError) as exc:
        runner.run("analyze", {"diagram": str(tmp_path / "missing.json")})
    assert exc.value.kind == "io"
    assert exc.value.exit_code == 4
    assert exc.value.http_status == 404

    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(runner.RunError) as exc:
        runner.run("analyze", {"diagram": str(bad)})
    assert exc.value.kind == "validation"

    notd = tmp_path / "notd.json"
    notd.write_text('{"hello": 1}')
    with pytest.raises(runner.RunError) as exc:
        runner.run("analyze", {"diagram": str(notd)})
    assert exc.value.kind == "validation"


def test_unknown_diagram_name_lists_shipped():
    with pytest.raises(runner.RunError) as exc:
        runner.run("analyze", {"diagram": "transformer"})
    assert exc.value.kind == "validation"
    assert "matmul" in str(exc.value)


def test_optimize_against_closed_form():
    out = runner.run(
        "optimize",
        {"diagram": "matmul", "memory": 16384.0, "quant": 4.0, "closed_form": "matmul"},
    )
    assert out["memory_values"] == 4096.0
    assert out["plan"]["groups"]["a"] >= 1
    assert out["h_star"] >= out["h_model"] * (1 - 1e-9)
    assert out["model"]["name"] == "matmul"


def test_optimize_fits_model_without_closed_form():
    out = runner.run("optimize", {"diagram": "matmul", "memory": 16384.0})
    assert out["model"]["name"].endswith("fit")
    assert out["h_star"] > 0


def test_optimize_error_kinds():
    with pytest.raises(runner.RunError) as exc:
        runner.run("optimize", {"diagram": "matmul"})
    assert exc.value.kind == "validation"
    with pytest.raises(runner.RunError) as exc:
        runner.run("optimize", {"diagram": "matmul", "memory": 4.0, "quant": 4.0})
    assert exc.value.kind == "infeasible"
    assert exc.value.exit_code == 3
    assert exc.value.http_status == 409
    with pytest.raises(runner.RunError) as exc:
        runner.run("optimize", {"diagram": "matmul", "memory": 1024.0, "closed_form": "lu"})
    assert exc.value.kind == "validation"


def test_model_requires_output_restricted_for_cache_catalog():
    req = {"model": "attention", "sizes": {"q": 384, "x": 1024, "d": 128}}
    with pytest.raises(runner.RunError, match="output_restricted"):
        runner.run("model", req)
    out = runner.run("model", {**req, "output_restricted": True, "quant": 2.0})
    assert out["catalog"] == "h100_sxm5_like"
    assert out["total"] == pytest.approx(out["breakdown"]["total_seconds"])
    assert out["cluster"] is None


def test_model_cluster_table_on_h800():
    req = {
        "model": "attention",
        "sizes": {"q": 384, "x": 1024, "d": 128},
        "catalog": "h800_like",
        "output_restricted": True,
        "cluster_n": [1, 2, 4],
    }
    out = runner.run("model", req)
    assert out["cluster"]["best_n"] == 2
    rows = out["cluster"]["rows"]
    assert [r["n"] for r in rows] == [1, 2, 4]
    assert rows[0]["delta_cost"] == 0.0
    with pytest.raises(runner.RunError, match="no cross bandwidth"):
        runner.run("model", {**req, "cluster_n": [8]})
    with pytest.raises(runner.RunError, match="cross-transfer"):
        runner.run("model", {**req, "catalog": "h100_sxm5_like"})


def test_model_accepts_inline_and_file_models(tmp_path):
    from weaveperf import optimizer as opt

    m = opt.closed_form("matmul", {"a": 64, "b": 64, "c": 64})
    out = runner.run(
        "model", {"model": m.to_json(), "catalog": "h800_like", "output_restricted": True}
    )
    assert out["model"]["name"] == "matmul"
    p = tmp_path / "m.json"
    p.write_text(json.dumps(m.to_json()))
    out2 = runner.run(
        "model", {"model": str(p), "catalog": "h800_like", "output_restricted": True}
    )
    assert out2["total"] == pytest.approx(out["total"])
    with pytest.raises(runner.RunError, match="no model named"):
        runner.run("model", {"model": "lu"})


def test_plan_default_payload():
    out = runner.run("plan", {})
    assert out["diagram"] == "attention"
    assert out["catalog"] == "h100_sxm5_like"
    assert out["params"]["w_q"] == 128
    assert len(out["variables"]) == 12
    assert out["config_table"]["n"] == 3
    assert out["config_table"]["feasible"] is True
    assert out["tensor_lower_bound"] == 6.0
    assert out["schedule"]["period"] == 6.09375
    assert out["bandwidth_threshold"] == pytest.approx(295.176, abs=0.01)
    assert out["ideal_throughput"] == pytest.approx(1.3193e15, rel=1e-4)
    assert "wg0 tensor" in out["gantt"]
    assert out["held_scores_table"] is None


def test_plan_presets_and_infeasible_tables_still_return():
    out = runner.run("plan", {"config": "fp16-large-tile", "strategy": "inter-warpgroup"})
    assert out["config_table"]["feasible"] is False  # reported, not an error
    assert out["schedule"]["period"] == 16.0
    with pytest.raises(runner.RunError, match="preset"):
        runner.run("plan", {"config": "no-such-preset"})


def test_plan_intra_reports_held_scores():
    out = runner.run("plan", {"config": "fp8-large-tile", "strategy": "intra-warpgroup"})
    held = out["held_scores_table"]
    assert held is not None
    assert any(r["symbol"] == "S+" for r in held["rows"])


def test_plan_divisor_error_carries_structured_extra():
    with pytest.raises(runner.RunError) as exc:
        runner.run("plan", {"config": {"d": 100}})
    e = exc.value
    assert e.kind == "validation"
    assert e.extra["divisor"] == {
        "axis": "d",
        "required": 128,
        "actual": 100,
        "sources": [32, 64, 128],
    }
    assert e.payload()["error"]["divisor"]["required"] == 128


def test_plan_rejects_other_diagrams():
    with pytest.raises(runner.RunError, match="attention"):
        runner.run("plan", {"diagram": "matmul"})


def test_verify_matmul_passes_and_reports_skips():
    out = runner.run("verify", {"diagram": "matmul", "trials": 3})
    assert out["passed"] is True
    kinds = {(c["kind"], c["axis"]) for c in out["checks"]}
    assert ("group", "a") in kinds
    assert ("stream", "b") in kinds
    assert "group b" in out["skipped"]  # operated axis cannot be group-split
    assert all(c["max_rel_err"] < 1e-6 for c in out["checks"])


def test_verify_zero_tolerance_fails():
    out = runner.run("verify", {"diagram": "matmul", "trials": 2, "tol": 0.0})
    assert out["passed"] is False


def test_catalogs_payload():
    out = runner.run("catalogs", {})
    names = [c["name"] for c in out["catalogs"]]
    assert "h100_sxm5_like" in names and "h800_like" in names
    assert out["diagrams"] == ["attention", "gqa", "matmul", "mha"]


def test_run_dispatch_validation():
    with pytest.raises(runner.RunError, match="unknown command"):
        runner.run("explode", {})
    with pytest.raises(runner.RunError, match="JSON object"):
        runner.run("analyze", [1, 2, 3])  # type: ignore[arg-type]
    with pytest.raises(ValueError):
        runner.RunError("nope", "bad kind")
