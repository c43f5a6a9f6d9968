"""Command-line interface: analyze, optimize, model, plan, verify, serve.

Every command builds a plain request dict, hands it to the shared runner,
and prints the canonical JSON payload; the HTTP service does exactly the
same, so piping a command's request body to the matching endpoint returns
identical bytes.  Exit codes: 0 success, 1 failed verification, 2 invalid
request, 3 infeasible configuration, 4 unreadable input.
"""

from __future__ import annotations

import sys
from typing import Any, Mapping

import click

from . import runner
from .pseudocode import ATTENTION_DEFAULTS
from .schedule import STRATEGIES


def _parse_value(text: str) -> Any:
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def _parse_pairs(items: tuple[str, ...], what: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for item in items:
        for part in item.split(","):
            part = part.strip()
            if not part:
                continue
            if "=" not in part:
                raise click.UsageError(f"{what} entries look like key=value, got {part!r}")
            k, v = part.split("=", 1)
            out[k.strip()] = _parse_value(v.strip())
    return out


def _emit(payload: Mapping[str, Any]) -> None:
    click.echo(runner.canonical_json(payload), nl=False)


def _execute(command: str, request: Mapping[str, Any]) -> dict[str, Any]:
    try:
        return runner.run(command, request)
    except runner.RunError as e:
        click.echo(runner.canonical_json(e.payload()), nl=False, err=True)
        sys.exit(e.exit_code)


@click.group()
@click.version_option(package_name="weaveperf")
def main() -> None:
    """Transfer costs, memory budgets, tiling plans, and warpgroup
    schedules for dataflow-diagram kernels."""


@main.command()
@click.argument("diagram")
@click.option("--level", default="l1", show_default=True, help="Memory level for the footprint bound.")
@click.option("--mode", default="exact", show_default=True, type=click.Choice(["exact", "idealized"]))
@click.option("--assume", multiple=True, help="Size-order assumption like x>d (repeatable).")
@click.option("--bind", multiple=True, help="Axis binding like q=128 (repeatable, comma-separable).")
@click.option("--text", is_flag=True, help="Print the readable report instead of JSON.")
def analyze(diagram: str, level: str, mode: str, assume: tuple[str, ...], bind: tuple[str, ...], text: bool) -> None:
    """Transfer volumes, flops, and the memory lower bound of DIAGRAM."""
    req: dict[str, Any] = {"diagram": diagram, "level": level, "mode": mode, "assume": list(assume)}
    bindings = _parse_pairs(bind, "--bind")
    if bindings:
        req["bindings"] = bindings
    payload = _execute("analyze", req)
    if text:
        click.echo(payload["text"])
    else:
        _emit(payload)


@main.command()
@click.argument("diagram")
@click.option("--memory", type=float, required=True, help="Footprint budget in bytes.")
@click.option("--quant", type=float, default=4.0, show_default=True, help="Bytes per value.")
@click.option("--level", default="l1", show_default=True)
@click.option("--mode", default="exact", show_default=True, type=click.Choice(["exact", "idealized"]))
@click.option("--closed-form", "closed_form", default=None, help="Compare against this named model instead of fitting one.")
def optimize(diagram: str, memory: float, quant: float, level: str, mode: str, closed_form: str | None) -> None:
    """Best integer group sizes for DIAGRAM under a memory budget."""
    req: dict[str, Any] = {
        "diagram": diagram,
        "memory": memory,
        "quant": quant,
        "level": level,
        "mode": mode,
    }
    if closed_form is not None:
        req["closed_form"] = closed_form
    _emit(_execute("optimize", req))


@main.command()
@click.argument("source")
@click.option("--catalog", default="h100_sxm5_like", show_default=True, help="Hardware catalog name or path.")
@click.option("--quant", type=float, default=1.0, show_default=True, help="Bytes per value.")
@click.option("--sizes", multiple=True, help="Axis sizes like q=384,x=1024 (repeatable).")
@click.option("--cluster-n", default=None, help="Comma-separated cluster sizes for the cross-transfer trade-off.")
@click.option("--output-restricted", is_flag=True, help="Enable cache/cross rewrites (working set is the output).")
@click.option("--distributed-top", is_flag=True, help="Allow a cross-transfer top level (distributed system).")
def model(source: str, catalog: str, quant: float, sizes: tuple[str, ...], cluster_n: str | None, output_restricted: bool, distributed_top: bool) -> None:
    """Weighted transfer cost of SOURCE (a model name, model file, or
    diagram) across a hardware catalog's levels."""
    req: dict[str, Any] = {
        "catalog": catalog,
        "quant": quant,
        "output_restricted": output_restricted,
        "allow_distributed_top": distributed_top,
    }
    if source in runner.CLOSED_FORM_NAMES or source.endswith(".json") and _looks_like_model(source):
        req["model"] = source
    else:
        req["diagram"] = source
    parsed = _parse_pairs(sizes, "--sizes")
    if parsed:
        req["sizes"] = parsed
    if cluster_n is not None:
        try:
            req["cluster_n"] = [int(x) for x in cluster_n.split(",") if x.strip()]
        except ValueError:
            raise click.UsageError(f"--cluster-n takes integers, got {cluster_n!r}")
    _emit(_execute("model", req))


def _looks_like_model(path: str) -> bool:
    import json
    from pathlib import Path

    p = Path(path)
    if not p.exists():
        return False
    try:
        obj = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError):
        return False
    return isinstance(obj, dict) and "terms" in obj


@main.command()
@click.argument("diagram", default="attention")
@click.option("--catalog", default="h100_sxm5_like", show_default=True)
@click.option(
    "--config",
    default=None,
    help=f"Preset ({', '.join(sorted(runner.CONFIG_PRESETS))}) and/or key=value pairs, "
    f"comma-separated.  Keys: {', '.join(sorted(ATTENTION_DEFAULTS))}, quant_*, pipeline_*.",
)
@click.option("--strategy", default="three-warpgroup", show_default=True, type=click.Choice(list(STRATEGIES)))
@click.option("--overheads", default=None, help="Per-pipeline overhead fractions like sfu=0.5,fp16=1.0.")
@click.option("--wgs", "n", type=int, default=None, help="Co-resident warpgroups (defaults to the capacity bound).")
@click.option("--text", is_flag=True, help="Print tables and the schedule chart instead of JSON.")
def plan(diagram: str, catalog: str, config: str | None, strategy: str, overheads: str | None, n: int | None, text: bool) -> None:
    """Variable-level memory plan, warpgroup budgets, and the overlap
    schedule for the attention kernel."""
    cfg: dict[str, Any] = {}
    if config:
        for part in config.split(","):
            part = part.strip()
            if not part:
                continue
            if "=" in part:
                k, v = part.split("=", 1)
                cfg[k.strip()] = _parse_value(v.strip())
            else:
                cfg["preset"] = part
    req: dict[str, Any] = {"diagram": diagram, "catalog": catalog, "strategy": strategy}
    if cfg:
        req["config"] = cfg
    if overheads is not None:
        req["overheads"] = _parse_pairs((overheads,), "--overheads")
    if n is not None:
        req["n"] = n
    payload = _execute("plan", req)
    if text:
        click.echo(payload["config_text"])
        click.echo()
        click.echo(payload["gantt"])
        util = payload["utilization"]
        click.echo()
        click.echo(
            f"strategy {payload['strategy']}: period {util['period']:g} clk/thread, "
            f"utilization {100 * util['fraction']:.1f}% (limited by {util['limiting']})"
        )
        click.echo(
            f"tensor lower bound {payload['tensor_lower_bound']:g} clk/thread; "
            f"bandwidth-bound below {payload['bandwidth_threshold']:.0f} rows; "
            f"ideal throughput {payload['ideal_throughput']:.3g} FLOP/s"
        )
    else:
        _emit(payload)


@main.command()
@click.argument("diagram")
@click.option("--trials", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tol", type=float, default=1e-6, show_default=True, help="Relative error tolerance.")
def verify(diagram: str, trials: int, seed: int, tol: float) -> None:
    """Check every group and stream expansion of DIAGRAM against the
    base diagram on random inputs.  Exits 1 if any check fails."""
    payload = _execute(
        "verify", {"diagram": diagram, "trials": trials, "seed": seed, "tol": tol}
    )
    _emit(payload)
    if not payload["passed"]:
        sys.exit(1)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host: str, port: int) -> None:
    """Run the stateless HTTP service (and the explorer UI when built)."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
