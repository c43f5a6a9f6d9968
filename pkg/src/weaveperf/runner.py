"""Shared request execution behind the command line and the HTTP service.

Each command is a pure function from a plain-dict request to a plain-dict
payload; the command line and the HTTP endpoints both call :func:`run`
and serialise with :func:`canonical_json`, so the same request yields the
same bytes on either surface.  Failures raise :class:`RunError` with a
kind that maps onto process exit codes and HTTP statuses.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable, Mapping

from . import diagram as dg
from . import hierarchy as hw
from . import optimizer as opt
from . import oracle
from . import pseudocode as pcode
from . import resources as res
from . import schedule as sched
from . import streaming

EXIT_CODES = {"validation": 2, "infeasible": 3, "io": 4}
HTTP_STATUS = {"validation": 400, "infeasible": 409, "io": 404}

CLOSED_FORM_NAMES = ("matmul", "attention", "mha", "gqa")

DIAGRAM_DIR = Path(__file__).parent / "data" / "diagrams"

#: named parameter bundles for ``plan``
CONFIG_PRESETS: dict[str, dict[str, Any]] = {
    "defaults": {},
    "fp16-large-tile": dict(sched.FP16_LARGE_TILE_CONFIG),
    "fp8-large-tile": dict(sched.FP8_LARGE_TILE_CONFIG),
}


class RunError(Exception):
    """A failed run: ``kind`` selects the exit code / HTTP status."""

    def __init__(self, kind: str, message: str, extra: Mapping[str, Any] | None = None):
        if kind not in EXIT_CODES:
            raise ValueError(f"unknown error kind {kind!r}")
        super().__init__(message)
        self.kind = kind
        self.extra = dict(extra or {})

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.kind]

    @property
    def http_status(self) -> int:
        return HTTP_STATUS[self.kind]

    def payload(self) -> dict[str, Any]:
        return {"error": {"kind": self.kind, "message": str(self), **self.extra}}


def canonical_json(payload: Mapping[str, Any]) -> str:
    """The one serialisation both surfaces emit (trailing newline included)."""
    return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# reference resolution


def list_diagrams() -> list[str]:
    if not DIAGRAM_DIR.is_dir():
        return []
    return sorted(p.stem for p in DIAGRAM_DIR.glob("*.json"))


def _read_json_file(path: Path) -> Any:
    try:
        text = path.read_text()
    except OSError as e:
        raise RunError("io", f"cannot read {path}: {e.strerror or e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise RunError("validation", f"{path} is not valid JSON: {e}") from e


def load_diagram(ref: Any) -> dg.Diagram:
    """Resolve a diagram reference: shipped name, file path, or inline JSON."""
    if isinstance(ref, Mapping):
        try:
            return dg.diagram_from_json(dict(ref))
        except (dg.DiagramError, KeyError, TypeError, ValueError) as e:
            raise RunError("validation", f"bad inline diagram: {e}") from e
    if not isinstance(ref, str):
        raise RunError("validation", f"diagram must be a name, path, or object, got {type(ref).__name__}")
    path = Path(ref)
    if path.suffix == ".json":
        if not path.exists():
            raise RunError("io", f"no such file: {path}")
        obj = _read_json_file(path)
        try:
            return dg.diagram_from_json(obj)
        except (dg.DiagramError, KeyError, TypeError, ValueError) as e:
            raise RunError("validation", f"{path} is not a diagram: {e}") from e
    shipped = DIAGRAM_DIR / f"{ref}.json"
    if shipped.exists():
        return dg.diagram_from_json(_read_json_file(shipped))
    raise RunError(
        "validation",
        f"no diagram named {ref!r}; shipped: {', '.join(list_diagrams()) or 'none'}",
    )


def load_catalog(ref: str) -> hw.Hierarchy:
    if not isinstance(ref, str):
        raise RunError("validation", f"catalog must be a name or path, got {type(ref).__name__}")
    path = Path(ref)
    if path.suffix == ".json" and not path.exists():
        raise RunError("io", f"no such file: {path}")
    try:
        return hw.load_catalog(ref)
    except hw.HierarchyError as e:
        raise RunError("validation", str(e)) from e
    except OSError as e:
        raise RunError("io", f"cannot read catalog {ref!r}: {e}") from e


def _require(req: Mapping[str, Any], key: str) -> Any:
    if key not in req or req[key] is None:
        raise RunError("validation", f"request is missing {key!r}")
    return req[key]


def _int_map(obj: Any, what: str) -> dict[str, int]:
    if obj is None:
        return {}
    if not isinstance(obj, Mapping):
        raise RunError("validation", f"{what} must be a mapping of names to integers")
    out: dict[str, int] = {}
    for k, v in obj.items():
        try:
            out[str(k)] = int(v)
        except (TypeError, ValueError):
            raise RunError("validation", f"{what}[{k!r}] must be an integer, got {v!r}")
    return out


# ---------------------------------------------------------------------------
# commands


def run_analyze(req: Mapping[str, Any]) -> dict[str, Any]:
    d = load_diagram(_require(req, "diagram"))
    level = str(req.get("level", "l1"))
    mode = str(req.get("mode", "exact"))
    assume = req.get("assume", [])
    if isinstance(assume, str):
        assume = [assume]
    bindings = _int_map(req.get("bindings"), "bindings")
    try:
        report = res.cost_report(d, mode=mode, level=level, assumptions=assume)
        if bindings:
            report = report.evaluate(bindings)
    except (dg.DiagramError, ValueError) as e:
        raise RunError("validation", str(e)) from e
    return {
        "command": "analyze",
        "diagram": d.name,
        "level": level,
        "mode": mode,
        "report": report.to_json(),
        "text": report.to_text(),
    }


def run_optimize(req: Mapping[str, Any]) -> dict[str, Any]:
    d = load_diagram(_require(req, "diagram"))
    try:
        memory = float(_require(req, "memory"))
        quant = float(req.get("quant", dg.DEFAULT_QUANT))
    except (TypeError, ValueError):
        raise RunError("validation", "memory and quant must be numbers")
    if quant <= 0:
        raise RunError("validation", f"quant must be positive, got {quant}")
    level = str(req.get("level", "l1"))
    mode = str(req.get("mode", "exact"))
    closed = req.get("closed_form")
    m_values = memory / quant
    try:
        plan = opt.optimize_groups(d, m_values, level=level, mode=mode)
        if closed is not None:
            if closed not in CLOSED_FORM_NAMES:
                raise RunError(
                    "validation",
                    f"no closed form named {closed!r}; have {', '.join(CLOSED_FORM_NAMES)}",
                )
            model = opt.closed_form(str(closed), sizes=d.axis_sizes())
        else:
            budgets = opt.sample_budget_grid(d, points=7, level=level, mode=mode)
            samples = opt.sample_transfers(d, budgets, level=level, mode=mode, relaxed=True)
            model = opt.extract_terms(samples, name=f"{d.name} fit")
        h_model = model.evaluate(m_values)
    except opt.InfeasibleError as e:
        raise RunError("infeasible", str(e)) from e
    except (opt.OptimizeError, opt.FitError, dg.DiagramError) as e:
        raise RunError("validation", str(e)) from e
    return {
        "command": "optimize",
        "diagram": d.name,
        "memory_bytes": memory,
        "quant": quant,
        "memory_values": m_values,
        "plan": plan.to_json(),
        "model": model.to_json(),
        "h_star": plan.transfers,
        "h_model": h_model,
    }


def _resolve_model(req: Mapping[str, Any]) -> tuple[opt.PerfModel, dict[str, int]]:
    """The performance model for ``model``: named closed form, inline
    JSON, model file, or fitted from a diagram."""
    sizes = _int_map(req.get("sizes"), "sizes")
    spec = req.get("model")
    if spec is not None:
        if isinstance(spec, str):
            if spec in CLOSED_FORM_NAMES:
                return opt.closed_form(spec, sizes=sizes or None), sizes
            path = Path(spec)
            if path.suffix == ".json":
                if not path.exists():
                    raise RunError("io", f"no such file: {path}")
                obj = _read_json_file(path)
                try:
                    return opt.PerfModel.from_json(obj), sizes
                except (KeyError, TypeError, ValueError, opt.OptimizeError) as e:
                    raise RunError("validation", f"{path} is not a model: {e}") from e
            raise RunError(
                "validation",
                f"no model named {spec!r}; have {', '.join(CLOSED_FORM_NAMES)} or a .json file",
            )
        if isinstance(spec, Mapping):
            try:
                return opt.PerfModel.from_json(dict(spec)), sizes
            except (KeyError, TypeError, ValueError, opt.OptimizeError) as e:
                raise RunError("validation", f"bad inline model: {e}") from e
        raise RunError("validation", "model must be a name, path, or object")
    d = load_diagram(_require(req, "diagram"))
    axis_sizes = {k: v for k, v in d.axis_sizes().items() if isinstance(v, int)}
    if d.name in CLOSED_FORM_NAMES:
        return opt.closed_form(d.name, sizes=d.axis_sizes()), axis_sizes
    budgets = opt.sample_budget_grid(d, points=7)
    samples = opt.sample_transfers(d, budgets, relaxed=True)
    return opt.extract_terms(samples, name=f"{d.name} fit"), axis_sizes


def run_model(req: Mapping[str, Any]) -> dict[str, Any]:
    h = load_catalog(str(req.get("catalog", "h100_sxm5_like")))
    try:
        quant = float(req.get("quant", 1.0))
    except (TypeError, ValueError):
        raise RunError("validation", "quant must be a number")
    output_restricted = bool(req.get("output_restricted", False))
    distributed_top = bool(req.get("allow_distributed_top", False))
    try:
        model, sizes = _resolve_model(req)
        bindings = sizes or None
        breakdown = hw.cost_breakdown(
            model, h, quant, bindings, output_restricted, distributed_top
        )
        total = hw.total_cost(
            model, h, quant, bindings, output_restricted, distributed_top
        )
    except (hw.HierarchyError, opt.OptimizeError, ValueError) as e:
        raise RunError("validation", str(e)) from e

    cluster = None
    grid = req.get("cluster_n")
    if grid is not None:
        if not isinstance(grid, (list, tuple)) or not grid:
            raise RunError("validation", "cluster_n must be a non-empty list of sizes")
        lvl = next((l for l in h.levels if l.role == "cross-transfer"), None)
        if lvl is None:
            raise RunError(
                "validation",
                f"catalog {h.name!r} has no cross-transfer level for a cluster trade-off",
            )
        link = h.cross_link(lvl.id)
        assert link is not None
        child = h.levels[[l.id for l in h.levels].index(lvl.id) + 1]
        by_n: dict[int, float] = {}
        for n in grid:
            n = int(n)
            if n == 1:
                continue
            if n not in link.bytes_per_s_by_n:
                raise RunError(
                    "validation",
                    f"catalog {h.name!r} has no cross bandwidth for cluster size {n}; "
                    f"have {sorted(link.bytes_per_s_by_n)}",
                )
            by_n[n] = 1.0 / link.bytes_per_s_by_n[n]
        try:
            table = hw.cluster_tradeoff(
                model,
                memory_c=float(child.bytes or 0),
                hinv_direct=h.parent_pipe(lvl.id).hinv,
                hinv_cross_by_n=by_n,
                quant=quant,
                bindings=sizes or None,
            )
        except (hw.HierarchyError, ValueError) as e:
            raise RunError("validation", str(e)) from e
        cluster = table.to_json()

    return {
        "command": "model",
        "catalog": h.name,
        "quant": quant,
        "model": model.to_json(),
        "total": total,
        "breakdown": breakdown,
        "cluster": cluster,
    }


def run_plan(req: Mapping[str, Any]) -> dict[str, Any]:
    ref = req.get("diagram", "attention")
    d = load_diagram(ref)
    if d.name != "attention":
        raise RunError(
            "validation",
            f"configuration planning covers the attention kernel family; "
            f"got diagram {d.name!r}",
        )
    h = load_catalog(str(req.get("catalog", "h100_sxm5_like")))

    config: dict[str, Any] = {}
    raw = req.get("config") or {}
    if isinstance(raw, str):
        raw = {"preset": raw}
    if not isinstance(raw, Mapping):
        raise RunError("validation", "config must be a mapping or preset name")
    raw = dict(raw)
    preset = raw.pop("preset", None)
    if preset is not None:
        if preset not in CONFIG_PRESETS:
            raise RunError(
                "validation",
                f"no config preset {preset!r}; have {', '.join(sorted(CONFIG_PRESETS))}",
            )
        config.update(CONFIG_PRESETS[preset])
    config.update(raw)

    strategy = str(req.get("strategy", "three-warpgroup"))
    overheads = req.get("overheads")
    if overheads is not None:
        if not isinstance(overheads, Mapping):
            raise RunError("validation", "overheads must be a mapping of pipeline to fraction")
        try:
            overheads = {str(k): float(v) for k, v in overheads.items()}
        except (TypeError, ValueError):
            raise RunError("validation", "overhead fractions must be numbers")
    n = req.get("n")
    if n is not None:
        try:
            n = int(n)
        except (TypeError, ValueError):
            raise RunError("validation", f"n must be an integer, got {n!r}")

    try:
        pc = pcode.attention_plan(config or None, catalog=h)
    except pcode.DivisorError as e:
        raise RunError(
            "validation",
            str(e),
            extra={
                "divisor": {
                    "axis": e.axis,
                    "required": e.required,
                    "actual": e.actual,
                    "sources": list(e.sources),
                }
            },
        ) from e
    except (pcode.PseudocodeError, streaming.StreamabilityError, dg.DiagramError) as e:
        raise RunError("validation", str(e)) from e

    try:
        rows = pcode.variable_table(pc)
        table = pcode.config_table(rows, h, n=n)
        cat = sched.PipelineCatalog.from_hierarchy(h)
        costs = sched.column_costs(pc, cat)
        schedule = sched.build_schedule(pc, cat, strategy=strategy, overheads=overheads)
        util = sched.utilization(schedule)
        threshold = sched.bandwidth_threshold(pc, h)
        throughput = sched.ideal_throughput(costs, cat)
    except (pcode.PseudocodeError, sched.ScheduleError, hw.HierarchyError) as e:
        raise RunError("validation", str(e)) from e

    held = None
    if strategy == "intra-warpgroup":
        held_rows = sched.with_next_scores(rows, pc)
        held = pcode.config_table(held_rows, h, n=table.n).to_json()

    payload = {
        "command": "plan",
        "diagram": d.name,
        "catalog": h.name,
        "strategy": strategy,
        "params": dict(pc.params),
        "variables": [r.to_json() for r in rows],
        "config_table": table.to_json(),
        "config_text": table.to_text(),
        "costs": [c.to_json() for c in costs],
        "tensor_lower_bound": sched.tensor_lower_bound(costs),
        "bandwidth_threshold": threshold,
        "ideal_throughput": throughput,
        "schedule": schedule.to_json(),
        "gantt": schedule.gantt(),
        "utilization": util.to_json(),
        "held_scores_table": held,
    }
    return payload


def _divisor_picks(size: int) -> list[int]:
    divs = [k for k in range(1, size + 1) if size % k == 0]
    picks = {1, size}
    nontrivial = [k for k in divs if 1 < k < size]
    if nontrivial:
        picks.add(nontrivial[0])
        picks.add(nontrivial[len(nontrivial) // 2])
    return sorted(picks)


def run_verify(req: Mapping[str, Any]) -> dict[str, Any]:
    d = load_diagram(_require(req, "diagram"))
    try:
        trials = int(req.get("trials", 20))
        seed = int(req.get("seed", 0))
        tol = float(req.get("tol", 1e-6))
    except (TypeError, ValueError):
        raise RunError("validation", "trials, seed, and tol must be numbers")
    if trials < 1:
        raise RunError("validation", f"trials must be >= 1, got {trials}")
    base = dg.strip_relabels(d)
    sizes = base.axis_sizes()
    for name, size in sizes.items():
        if not isinstance(size, int):
            raise RunError(
                "validation",
                f"verification needs concrete axis sizes; {name!r} is {size!r}",
            )

    checks: list[dict[str, Any]] = []
    skipped: dict[str, str] = {}

    def record(kind: str, axis: str, size: int, expanded: dg.Diagram) -> None:
        rep = oracle.equivalence_check(base, expanded, trials=trials, seed=seed, tol=tol)
        checks.append(
            {
                "kind": kind,
                "axis": axis,
                "size": size,
                "trials": rep.trials,
                "max_rel_err": rep.max_rel_err,
                "passed": rep.passed,
            }
        )

    for axis in sorted(sizes):
        size = sizes[axis]
        try:
            for g in _divisor_picks(size):
                record("group", axis, g, dg.expand_groups(base, axis, g))
        except dg.DiagramError as e:
            skipped[f"group {axis}"] = str(e)
        cert = streaming.check_streamable(base, axis)
        if isinstance(cert, streaming.NotStreamable):
            skipped[f"stream {axis}"] = cert.reason
            continue
        try:
            for s in _divisor_picks(size):
                record("stream", axis, s, streaming.expand_certified(base, cert, s))
        except (dg.DiagramError, streaming.StreamabilityError) as e:
            skipped[f"stream {axis}"] = str(e)

    if not checks:
        raise RunError(
            "validation",
            f"nothing to verify on {d.name!r}: {skipped or 'no expandable axes'}",
        )
    return {
        "command": "verify",
        "diagram": d.name,
        "trials": trials,
        "seed": seed,
        "tol": tol,
        "checks": checks,
        "skipped": skipped,
        "passed": all(c["passed"] for c in checks),
    }


def run_catalogs(req: Mapping[str, Any]) -> dict[str, Any]:
    payload: dict[str, Any] = {"command": "catalogs", "catalogs": [], "diagrams": list_diagrams()}
    for name in hw.list_catalogs():
        try:
            h = hw.load_catalog(name)
        except hw.HierarchyError:
            continue
        payload["catalogs"].append(h.to_json())
    return payload


COMMANDS: dict[str, Callable[[Mapping[str, Any]], dict[str, Any]]] = {
    "analyze": run_analyze,
    "optimize": run_optimize,
    "model": run_model,
    "plan": run_plan,
    "verify": run_verify,
    "catalogs": run_catalogs,
}


def run(command: str, request: Mapping[str, Any]) -> dict[str, Any]:
    """Execute one command; unexpected engine errors become validation
    failures so callers always see a :class:`RunError`."""
    if command not in COMMANDS:
        raise RunError("validation", f"unknown command {command!r}")
    if not isinstance(request, Mapping):
        raise RunError("validation", "request body must be a JSON object")
    try:
        return COMMANDS[command](request)
    except RunError:
        raise
    except (dg.DiagramError, ValueError) as e:
        raise RunError("validation", str(e)) from e
    except OSError as e:
        raise RunError("io", str(e)) from e
