"""Stateless HTTP facade over the shared runner.

POST /api/{analyze,optimize,model,plan,verify} take the same request
objects the command line builds and return the same canonical JSON
bytes.  GET /api/catalogs lists the shipped hardware catalogs and
example diagrams.  When the explorer bundle has been built, its static
assets are served from the root path.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Mapping

from fastapi import FastAPI, Request, Response

from . import runner

POST_COMMANDS = ("analyze", "optimize", "model", "plan", "verify")

#: explorer bundle location; the env var overrides the in-repo default
UI_DIR_ENV = "WEAVEPERF_UI_DIR"
DEFAULT_UI_DIR = Path(__file__).resolve().parents[2] / "frontend" / "dist"


def _json_response(payload: Mapping[str, Any], status: int = 200) -> Response:
    return Response(
        content=runner.canonical_json(payload),
        status_code=status,
        media_type="application/json",
    )


def create_app() -> FastAPI:
    app = FastAPI(title="weaveperf", docs_url=None, redoc_url=None)

    @app.get("/api/catalogs")
    def catalogs() -> Response:
        try:
            return _json_response(runner.run("catalogs", {}))
        except runner.RunError as e:
            return _json_response(e.payload(), e.http_status)

    def _register(command: str) -> None:
        async def endpoint(request: Request) -> Response:
            try:
                body = await request.body()
                obj = json.loads(body) if body else {}
            except json.JSONDecodeError as e:
                return _json_response(
                    {"error": {"kind": "validation", "message": f"request body is not JSON: {e}"}},
                    400,
                )
            if not isinstance(obj, dict):
                return _json_response(
                    {"error": {"kind": "validation", "message": "request body must be a JSON object"}},
                    400,
                )
            try:
                return _json_response(runner.run(command, obj))
            except runner.RunError as e:
                return _json_response(e.payload(), e.http_status)

        app.add_api_route(f"/api/{command}", endpoint, methods=["POST"], name=command)

    for command in POST_COMMANDS:
        _register(command)

    ui_dir = Path(os.environ.get(UI_DIR_ENV, DEFAULT_UI_DIR))
    if ui_dir.is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
