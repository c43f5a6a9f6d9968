"""Clock-cycle accounting and warpgroup overlap schedules.

Every compute column of a loop program maps to one SM pipeline (tensor
cores, the special function unit, or the FP16 vector core).  Costs are
normalised to clock cycles per active thread: the per-thread op count of
a column (weaved axes multiplied out, the threadblock tile axis ignored)
divided by the pipeline's ops per clock.  Whole-SM time for a block is
then clk-per-thread times the number of active threads.

On top of the costs sit overlap schedules: lanes (one per warpgroup)
holding blocks whose widths include an overhead accommodation for
non-tensor work, with barriers that ideally wait on tensor cores.  The
achieved iteration period gives a utilization prediction against the
tensor-core lower bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .pseudocode import (
    THREADS_PER_WARPGROUP,
    PseudocodeDiagram,
    VariableRow,
    _partition_params,
)

STRATEGIES = ("three-warpgroup", "inter-warpgroup", "intra-warpgroup")

#: accommodation for work not covered by the pipeline cost model
#: (type conversions, FP32 exponentials, address arithmetic)
DEFAULT_OVERHEADS: dict[str, float] = {"sfu": 0.5, "fp16": 1.0}


class ScheduleError(ValueError):
    """Schedule construction failed or the strategy is infeasible."""


# ---------------------------------------------------------------------------
# pipeline catalog


@dataclass(frozen=True)
class PipelineCatalog:
    """Per-SM pipeline throughputs and clocking.

    ``ops_per_clk`` is normalised so that clk-per-thread times the
    number of active threads equals whole-SM clock cycles.  Instruction
    latency and small-tile startup cost are named extension points and
    default to zero (latency is assumed fully hidden).
    """

    ops_per_clk: Mapping[str, float]
    clock_hz: float
    n_sm: int
    peak_flops: Mapping[str, float] = field(default_factory=dict)
    latency_clk: float = 0.0
    tile_clk: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "ops_per_clk", dict(self.ops_per_clk))
        object.__setattr__(self, "peak_flops", dict(self.peak_flops))
        for p, v in self.ops_per_clk.items():
            if v <= 0:
                raise ScheduleError(f"pipeline {p!r} has non-positive ops/clk {v}")

    @classmethod
    def from_hierarchy(cls, h: Any) -> "PipelineCatalog":
        pipes = dict(h.pipelines)
        if "ops_per_clk" not in pipes:
            raise ScheduleError(
                f"catalog {h.name!r} has no pipeline table (ops_per_clk)"
            )
        return cls(
            ops_per_clk=pipes["ops_per_clk"],
            clock_hz=h.clock_hz,
            n_sm=h.n_sm,
            peak_flops=pipes.get("peak_flops", {}),
            latency_clk=float(pipes.get("latency_clk", 0.0)),
            tile_clk=float(pipes.get("tile_clk", 0.0)),
        )

    def is_tensor(self, pipeline: str) -> bool:
        return pipeline.startswith("tensor")


def pipeline_unit(pipeline: str) -> str:
    """Physical execution unit behind a pipeline name.

    The tensor pipelines are one unit at different operand widths, so
    their demands serialise with each other.
    """
    return "tensor" if pipeline.startswith("tensor") else pipeline


# ---------------------------------------------------------------------------
# column costs (ops and clocks per thread)


@dataclass(frozen=True)
class ColumnCost:
    column: str
    pipeline: str
    ops_per_thread: float
    clk_per_thread: float

    def to_json(self) -> dict[str, Any]:
        return {
            "column": self.column,
            "pipeline": self.pipeline,
            "ops_per_thread": self.ops_per_thread,
            "clk_per_thread": self.clk_per_thread,
        }


def _prod(values: Iterable[float]) -> float:
    out = 1.0
    for v in values:
        out *= v
    return out


def column_costs(pc: PseudocodeDiagram, cat: PipelineCatalog) -> list[ColumnCost]:
    """Per-thread op counts and clock cycles for each body compute column.

    Counts cover one whole stream chunk (subloop passes summed).  The
    baseline op count of a column is multiplied by its weaved axes,
    except the threadblock tile axis, which normalises the figures per
    active thread; per-thread rows of the partitioned axis do multiply.
    """
    if not pc.assigned:
        raise ScheduleError("assign_levels must run before column_costs")
    part = _partition_params(pc.partition_axis) if pc.partition_axis else None
    t = pc.params[part[2]] if part else 1
    s = pc.params[pc.chunk_param]
    sub = pc.subloops[0] if pc.subloops else None
    count = sub.count(pc.params) if sub else 1

    def full_extent(term: str) -> float:
        # a chunk or sub-chunk axis contributes the whole chunk: subloop
        # passes are summed into the per-chunk figure
        if term == pc.chunk_param or (sub and term == sub.param):
            return float(s)
        if part and term in part:
            return 1.0  # handled by the per-thread row factor
        return float(pc.params[term])

    out: list[ColumnCost] = []
    for c in pc.body:
        if c.kind != "compute":
            continue
        if c.pipeline is None:
            raise ScheduleError(f"column {c.name!r} has no pipeline assigned")
        if c.pipeline not in cat.ops_per_clk:
            raise ScheduleError(
                f"pipeline {c.pipeline!r} of column {c.name!r} is not in the "
                f"catalog ({sorted(cat.ops_per_clk)})"
            )
        if c.op in ("contraction", "matmul-add"):
            k = _prod(full_extent(a) for a in c.roles.get("k", ()))
            n = _prod(full_extent(a) for a in c.roles.get("n", ()))
            ops = 2.0 * k * n * t
        elif c.op == "softmax-unscaled":
            # one exponential per weight plus one running-max update per
            # subloop pass
            ops = t * (s + count)
        elif c.op == "add" and c.delta_weave:
            # rescale the carry and add the update: two ops per output
            # value, once per subloop pass
            y = pc.variables[c.writes[0]]
            width = _prod(
                float(x) if isinstance(x, int) else full_extent(x)
                for x in y.shape
                if not (part and x in part)
            )
            ops = 2.0 * width * t * count
        else:
            continue
        out.append(
            ColumnCost(
                column=c.name,
                pipeline=c.pipeline,
                ops_per_thread=ops,
                clk_per_thread=ops / cat.ops_per_clk[c.pipeline],
            )
        )
    return out


def tensor_lower_bound(costs: Sequence[ColumnCost]) -> float:
    """Clock cycles per thread the tensor cores need per iteration; no
    schedule can beat this."""
    return sum(c.clk_per_thread for c in costs if c.pipeline.startswith("tensor"))


def bandwidth_threshold(pc: PseudocodeDiagram, h: Any) -> float:
    """Minimum threadblock tile rows to avoid a boundary-bandwidth limit.

    Compute time per iteration is the tensor lower bound times the
    active threads over the clock rate; it must cover moving the
    per-iteration boundary traffic (the streamed chunk loads) at the
    per-SM share of the far-level bandwidth.  Assumes no caching and a
    long stream.
    """
    cat = PipelineCatalog.from_hierarchy(h)
    k_tc = tensor_lower_bound(column_costs(pc, cat))
    if k_tc <= 0:
        raise ScheduleError("no tensor-core work: the bound is vacuous")
    h_bytes = 0.0
    for c in pc.body:
        if c.kind != "load":
            continue
        var = pc.variables[c.writes[0]]
        h_bytes += _prod(
            float(x) if isinstance(x, int) else float(pc.params[x]) for x in var.shape
        ) * float(var.quant)
    top = h.levels[0]
    pipe = next((p for p in h.pipes if p.src == top.id), None)
    if pipe is None:
        raise ScheduleError(f"catalog {h.name!r} has no pipe out of {top.id!r}")
    return cat.clock_hz * h_bytes * cat.n_sm / (k_tc * pipe.bytes_per_s)


def ideal_throughput(costs: Sequence[ColumnCost], cat: PipelineCatalog) -> float:
    """Tensor-core bottlenecked FLOPs/s if nothing else ever waits.

    The fastest tensor pipeline could retire ops for the whole lower
    bound; the achieved fraction is the actual tensor ops over that
    ceiling, applied to the corresponding peak rate.
    """
    tensor = [c for c in costs if c.pipeline.startswith("tensor")]
    if not tensor:
        raise ScheduleError("no tensor-core columns to bound throughput")
    k_tc = tensor_lower_bound(costs)
    fastest = max(tensor, key=lambda c: cat.ops_per_clk[c.pipeline])
    rate = cat.ops_per_clk[fastest.pipeline]
    quant_key = fastest.pipeline.removeprefix("tensor_")
    peak = cat.peak_flops.get(quant_key)
    if peak is None:
        raise ScheduleError(
            f"catalog has no peak FLOPs for {quant_key!r} "
            f"(have {sorted(cat.peak_flops)})"
        )
    total_ops = sum(c.ops_per_thread for c in tensor)
    return peak * total_ops / (k_tc * rate)


# ---------------------------------------------------------------------------
# overlap schedules


@dataclass(frozen=True)
class ScheduleBlock:
    lane: int
    pipeline: str
    label: str
    start: float
    clk: float
    overhead: float
    barrier_before: bool

    @property
    def width(self) -> float:
        return self.clk * (1.0 + self.overhead)

    def to_json(self) -> dict[str, Any]:
        return {
            "lane": self.lane,
            "pipeline": self.pipeline,
            "label": self.label,
            "start": self.start,
            "clk": self.clk,
            "overhead": self.overhead,
            "width": self.width,
            "barrier_before": self.barrier_before,
        }


@dataclass(frozen=True)
class Schedule:
    strategy: str
    lanes: int
    blocks: tuple[ScheduleBlock, ...]
    period: float  # achieved clk per thread per iteration
    tensor_bound: float
    demands: Mapping[str, float]  # widened clk per iteration, by execution unit
    path: float  # serialization floor of the strategy
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "demands", dict(self.demands))

    @property
    def rotation(self) -> float:
        """Clk per thread for one full cycle of all lanes."""
        return self.period * self.lanes

    def lane_blocks(self, lane: int) -> list[ScheduleBlock]:
        return [b for b in self.blocks if b.lane == lane]

    def to_json(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy,
            "lanes": self.lanes,
            "period": self.period,
            "rotation": self.rotation,
            "tensor_bound": self.tensor_bound,
            "demands": dict(self.demands),
            "path": self.path,
            "blocks": [b.to_json() for b in self.blocks],
            "notes": list(self.notes),
        }

    def gantt(self, chars_per_clk: int = 2) -> str:
        """Plain-text chart: one row per warpgroup and execution unit,
        one character per clock bucket.  Upper-case letters are modelled
        work, ``/`` the overhead accommodation, ``|`` a barrier at the
        block start."""
        span = max((b.start + b.width for b in self.blocks), default=0.0)
        width = max(int(math.ceil(span * chars_per_clk)), 1)
        rows: dict[tuple[int, str], list[str]] = {}
        for b in sorted(self.blocks, key=lambda b: (b.lane, b.start)):
            key = (b.lane, pipeline_unit(b.pipeline))
            row = rows.setdefault(key, [" "] * width)
            letter = b.pipeline[0].upper()
            lo = int(round(b.start * chars_per_clk))
            mid = int(round((b.start + b.clk) * chars_per_clk))
            hi = int(round((b.start + b.width) * chars_per_clk))
            for i in range(lo, min(hi, width)):
                row[i] = letter if i < mid else "/"
            if b.barrier_before and lo < width:
                row[lo] = "|"
        labels = {k: f"wg{k[0]} {k[1]}" for k in rows}
        pad = max(len(v) for v in labels.values())
        ruler = " " * (pad + 1) + ("+" + "-" * (chars_per_clk - 1)) * (
            width // chars_per_clk
        )
        lines = [
            f"{labels[k]:<{pad}} " + "".join(row).rstrip()
            for k, row in rows.items()
        ]
        legend = ", ".join(f"{p[0].upper()}={p}" for p in sorted(self.demands))
        return "\n".join(
            [ruler] + lines + [" " * (pad + 1) + f"({legend}; /=overhead, |=barrier)"]
        )


def _widen(clk: float, pipeline: str, overheads: Mapping[str, float]) -> float:
    return clk * (1.0 + overheads.get(pipeline, 0.0))


def build_schedule(
    pc: PseudocodeDiagram,
    cat: PipelineCatalog,
    strategy: str = "three-warpgroup",
    overheads: Mapping[str, float] | None = None,
) -> Schedule:
    """Lay out one iteration per lane under the chosen overlap strategy.

    ``three-warpgroup`` staggers three independent lanes so the tensor
    pipeline never drains, with the first product split in two to keep
    two iterations active; barriers wait on tensor blocks.
    ``inter-warpgroup`` staggers two lanes half a period apart.
    ``intra-warpgroup`` holds the next score tile inside a single lane,
    overlapping the previous reduction with the next score product;
    the reduction then serialises with the combine product.

    Block widths include the per-pipeline overhead accommodation
    (fraction of the base cost, ``DEFAULT_OVERHEADS`` unless given).
    The achieved period is the largest pipeline demand per iteration,
    floored by the strategy's serialisation path.
    """
    if strategy not in STRATEGIES:
        raise ScheduleError(f"unknown strategy {strategy!r}; pick from {STRATEGIES}")
    ovh = dict(DEFAULT_OVERHEADS if overheads is None else overheads)
    for p in ovh:
        if ovh[p] < 0:
            raise ScheduleError(f"overhead for {p!r} must be >= 0")
    costs = column_costs(pc, cat)
    if not costs:
        raise ScheduleError("the loop body has no compute columns to schedule")
    tensor_cols = [c for c in costs if cat.is_tensor(c.pipeline)]
    other_cols = [c for c in costs if not cat.is_tensor(c.pipeline)]
    k_tc = tensor_lower_bound(costs)

    demands: dict[str, float] = {}
    for c in costs:
        u = pipeline_unit(c.pipeline)
        demands[u] = demands.get(u, 0.0) + _widen(c.clk_per_thread, c.pipeline, ovh)

    lanes = {"three-warpgroup": 3, "inter-warpgroup": 2, "intra-warpgroup": 1}[strategy]
    order = [c for c in costs]  # body order

    notes: list[str] = []
    if strategy == "intra-warpgroup":
        if len(tensor_cols) < 2:
            raise ScheduleError(
                "intra-warpgroup overlap needs separate score and combine "
                "products to keep two iterations active in one lane"
            )
        score, combine = tensor_cols[0], tensor_cols[-1]
        reduce_w = max(
            (
                _widen(c.clk_per_thread, c.pipeline, ovh)
                for c in other_cols
                if order.index(c) < order.index(combine)
            ),
            default=0.0,
        )
        score_w = _widen(score.clk_per_thread, score.pipeline, ovh)
        combine_w = _widen(combine.clk_per_thread, combine.pipeline, ovh)
        path = max(score_w, reduce_w) + combine_w
        notes.append(
            "one lane holds the next score tile beside the current one; "
            "account its bytes again when checking register capacity"
        )
    else:
        path = sum(_widen(c.clk_per_thread, c.pipeline, ovh) for c in costs) / lanes

    period = max(max(demands.values()), path)

    blocks: list[ScheduleBlock] = []
    for lane in range(lanes):
        offset = lane * period
        if strategy == "intra-warpgroup":
            score, combine = tensor_cols[0], tensor_cols[-1]
            score_w = _widen(score.clk_per_thread, score.pipeline, ovh)
            cursor = 0.0
            blocks.append(
                ScheduleBlock(
                    lane, score.pipeline, f"{score.column} (next)", 0.0,
                    score.clk_per_thread, ovh.get(score.pipeline, 0.0), False,
                )
            )
            for c in other_cols:
                if order.index(c) < order.index(combine):
                    blocks.append(
                        ScheduleBlock(
                            lane, c.pipeline, f"{c.column} (carry)", cursor,
                            c.clk_per_thread, ovh.get(c.pipeline, 0.0), True,
                        )
                    )
                    cursor += _widen(c.clk_per_thread, c.pipeline, ovh)
            cursor = max(cursor, score_w)
            blocks.append(
                ScheduleBlock(
                    lane, combine.pipeline, f"{combine.column} (carry)", cursor,
                    combine.clk_per_thread, ovh.get(combine.pipeline, 0.0), True,
                )
            )
            cursor += _widen(combine.clk_per_thread, combine.pipeline, ovh)
            for c in other_cols:
                if order.index(c) > order.index(combine):
                    blocks.append(
                        ScheduleBlock(
                            lane, c.pipeline, f"{c.column} (carry)", cursor,
                            c.clk_per_thread, ovh.get(c.pipeline, 0.0), True,
                        )
                    )
                    cursor += _widen(c.clk_per_thread, c.pipeline, ovh)
            continue
        cursor = offset
        prev_pipe: str | None = None
        for c in costs:
            split = (
                strategy == "three-warpgroup"
                and cat.is_tensor(c.pipeline)
                and c is tensor_cols[0]
                and c.column in pc.splittable
            )
            pieces = 2 if split else 1
            for piece in range(pieces):
                label = c.column + (f" ({piece + 1}/2)" if split else "")
                blocks.append(
                    ScheduleBlock(
                        lane,
                        c.pipeline,
                        label,
                        cursor,
                        c.clk_per_thread / pieces,
                        ovh.get(c.pipeline, 0.0),
                        prev_pipe is not None and prev_pipe != c.pipeline,
                    )
                )
                cursor += _widen(c.clk_per_thread / pieces, c.pipeline, ovh)
                prev_pipe = c.pipeline

    # sanity: per (lane, unit) the blocks must not overlap
    for lane in range(lanes):
        per_pipe: dict[str, list[tuple[float, float]]] = {}
        for b in blocks:
            if b.lane == lane:
                per_pipe.setdefault(pipeline_unit(b.pipeline), []).append(
                    (b.start, b.start + b.width)
                )
        for spans in per_pipe.values():
            spans.sort()
            for (a0, a1), (b0, _) in zip(spans, spans[1:]):
                if b0 < a1 - 1e-9:
                    raise ScheduleError(
                        f"internal: overlapping blocks on one pipeline in lane {lane}"
                    )

    return Schedule(
        strategy=strategy,
        lanes=lanes,
        blocks=tuple(blocks),
        period=period,
        tensor_bound=k_tc,
        demands=demands,
        path=path,
        notes=tuple(notes),
    )


# ---------------------------------------------------------------------------
# utilization


@dataclass(frozen=True)
class UtilizationReport:
    fraction: float
    limiting: str
    ideal_period: float
    period: float
    idle: Mapping[str, float]  # per execution unit, fraction of the period

    def __post_init__(self) -> None:
        object.__setattr__(self, "idle", dict(self.idle))

    def to_json(self) -> dict[str, Any]:
        return {
            "fraction": self.fraction,
            "limiting": self.limiting,
            "ideal_period": self.ideal_period,
            "period": self.period,
            "idle": dict(self.idle),
        }


def utilization(s: Schedule, bottleneck: str = "tensor") -> UtilizationReport:
    """Achieved fraction of the bottleneck-pipeline bound.

    The ideal period is the per-iteration demand of the bottleneck
    pipeline family at zero overhead; the fraction is ideal over
    achieved.  Idle time per pipeline counts modelled work only, so an
    overhead accommodation that goes unused shows up as idle.
    """
    base: dict[str, float] = {}
    for b in s.blocks:
        u = pipeline_unit(b.pipeline)
        base[u] = base.get(u, 0.0) + b.clk
    base = {u: v / s.lanes for u, v in base.items()}
    ideal = sum(v for p, v in base.items() if p.startswith(bottleneck))
    if ideal <= 0:
        raise ScheduleError(f"no {bottleneck!r} pipeline work in the schedule")
    fraction = min(ideal / s.period, 1.0)

    eps = 1e-9
    if s.period <= ideal + eps:
        limiting = max(
            (p for p in s.demands if p.startswith(bottleneck)),
            key=lambda p: s.demands[p],
        )
    else:
        candidates = {p: d for p, d in s.demands.items() if d >= s.period - eps}
        if candidates:
            limiting = max(candidates, key=lambda p: candidates[p])
        else:
            # serialisation-bound: blame the widest non-bottleneck block
            widest = max(
                (b for b in s.blocks if not b.pipeline.startswith(bottleneck)),
                key=lambda b: b.width,
            )
            limiting = widest.pipeline
    idle = {
        p: max(0.0, 1.0 - busy / s.period) for p, busy in sorted(base.items())
    }
    return UtilizationReport(
        fraction=fraction,
        limiting=limiting,
        ideal_period=ideal,
        period=s.period,
        idle=idle,
    )


# ---------------------------------------------------------------------------
# comparison configurations and register-pressure helper


#: large-tile FP16 configuration: both products on the FP16 tensor
#: pipeline, FP16 operands throughout, one chunk-sized subloop pass
FP16_LARGE_TILE_CONFIG: dict[str, Any] = {
    "s_x": 128,
    "u_x": 128,
    "n_wg": 1,
    "quant_q": 2,
    "quant_k": 2,
    "quant_v": 2,
    "quant_p": 2,
    "pipeline_qk": "tensor_fp16",
    "pipeline_pv": "tensor_fp16",
}

#: large-tile FP8 configuration: both products on the FP8 tensor pipeline
FP8_LARGE_TILE_CONFIG: dict[str, Any] = {
    "s_x": 128,
    "u_x": 128,
    "n_wg": 1,
    "quant_v": 1,
    "quant_p": 1,
    "pipeline_pv": "tensor_fp8",
}


def with_next_scores(
    rows: Sequence[VariableRow], pc: PseudocodeDiagram
) -> list[VariableRow]:
    """Add the extra score tile an intra-warpgroup lane keeps live.

    Holding the next iteration's scores doubles that allocation, which
    is what pushes single-lane strategies toward register spills.
    """
    score_col = next(
        (c for c in pc.body if c.level == "tensor-fragment"), None
    )
    if score_col is None:
        raise ScheduleError("no tensor-fragment column; nothing to hold")
    sym = score_col.writes[0]
    for r in rows:
        if sym in r.symbol.split("/"):
            import dataclasses

            extra = dataclasses.replace(
                r, symbol=f"{sym}+", description=f"next-iteration {r.description}"
            )
            return list(rows) + [extra]
    raise ScheduleError(f"no variable row for {sym!r}")
