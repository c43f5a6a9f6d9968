from __future__ import annotations

import json

import pytest
from fastapi.testclient import TestClient

from weaveperf import runner
from weaveperf.service import create_app


@pytest.fixture(scope="module")
def client():
    with TestClient(create_app()) as c:
        yield c


SAMPLE_REQUESTS = {
    "analyze": {"diagram": "attention", "mode": "idealized"},
    "optimize": {"diagram": "matmul", "memory": 16384.0, "closed_form": "matmul"},
    "model": {
        "model": "attention",
        "sizes": {"q": 384, "x": 1024, "d": 128},
        "output_restricted": True,
        "quant": 2.0,
    },
    "plan": {"strategy": "three-warpgroup"},
    "verify": {"diagram": "matmul", "trials": 2},
}


@pytest.mark.parametrize("command", sorted(SAMPLE_REQUESTS))
def test_http_bytes_match_cli_serialisation(client, command):
    """The service must return byte-identical JSON to the command line."""
    req = SAMPLE_REQUESTS[command]
    resp = client.post(f"/api/{command}", content=json.dumps(req))
    assert resp.status_code == 200
    assert resp.headers["content-type"].startswith("application/json")
    expected = runner.canonical_json(runner.run(command, req))
    assert resp.content.decode() == expected


def test_catalogs_endpoint_bytes(client):
    resp = client.get("/api/catalogs")
    assert resp.status_code == 200
    assert resp.content.decode() == runner.canonical_json(runner.run("catalogs", {}))
    names = [c["name"] for c in resp.json()["catalogs"]]
    assert "h100_sxm5_like" in names


def test_validation_maps_to_400(client):
    resp = client.post("/api/analyze", content=json.dumps({"diagram": "nonesuch"}))
    assert resp.status_code == 400
    assert resp.json()["error"]["kind"] == "validation"


def test_infeasible_maps_to_409(client):
    resp = client.post(
        "/api/optimize",
        content=json.dumps({"diagram": "matmul", "memory": 4.0, "quant": 4.0}),
    )
    assert resp.status_code == 409
    assert resp.json()["error"]["kind"] == "infeasible"


def test_missing_file_maps_to_404(client, tmp_path):
    resp = client.post(
        "/api/analyze", content=json.dumps({"diagram": str(tmp_path / "gone.json")})
    )
    assert resp.status_code == 404
    assert resp.json()["error"]["kind"] == "io"


def test_malformed_body_maps_to_400(client):
    resp = client.post("/api/plan", content="{oops")
    assert resp.status_code == 400
    assert "not JSON" in resp.json()["error"]["message"]
    resp2 = client.post("/api/plan", content=json.dumps([1, 2, 3]))
    assert resp2.status_code == 400
    assert "JSON object" in resp2.json()["error"]["message"]


def test_empty_body_uses_defaults(client):
    resp = client.post("/api/plan")
    assert resp.status_code == 200
    assert resp.json()["config_table"]["n"] == 3


def test_divisor_error_payload_over_http(client):
    resp = client.post("/api/plan", content=json.dumps({"config": {"d": 100}}))
    assert resp.status_code == 400
    err = resp.json()["error"]
    assert err["divisor"] == {
        "axis": "d",
        "required": 128,
        "actual": 100,
        "sources": [32, 64, 128],
    }


def test_ui_bundle_served_when_present(tmp_path, monkeypatch):
    (tmp_path / "index.html").write_text("<html><body>explorer</body></html>")
    monkeypatch.setenv("WEAVEPERF_UI_DIR", str(tmp_path))
    with TestClient(create_app()) as c:
        resp = c.get("/")
        assert resp.status_code == 200
        assert "explorer" in resp.text
        # API routes still win over the static mount
        assert c.get("/api/catalogs").status_code == 200


def test_no_ui_dir_means_api_only(tmp_path, monkeypatch):
    monkeypatch.setenv("WEAVEPERF_UI_DIR", str(tmp_path / "absent"))
    with TestClient(create_app()) as c:
        assert c.get("/").status_code == 404
        assert c.get("/api/catalogs").status_code == 200
