"""Explicit-loop program extraction and memory configuration tables.

A certified streamed diagram is expanded into a loop program: a prologue
(one-off loads, state initialisation from the empty stream), a body run
once per stream chunk, and an epilogue (finalisation and store).  The
program is then refined in stages that mirror how a kernel is planned:

1. ``expand_loop``    -- build the loop program from a certificate,
2. ``find_subloops``  -- mark accumulator subloops and linearly
                         splittable matrix multiplications,
3. ``assign_levels``  -- place columns on memory levels / pipelines and
                         declare staged copies of operands,
4. ``apply_divisors`` -- collect and check axis divisibility constraints
                         (coalescing, warpgroups, tensor-core operands),
5. ``variable_table`` / ``config_table`` -- liveness-derived variable
                         rows and per-level memory budgets.

Shapes are expressed in plan parameters rather than concrete axis sizes:
a partitioned output axis ``a`` appears as ``g_a`` (whole threadblock
tile), ``w_a`` (one warpgroup's slice) or ``t_a`` (one thread's slice);
a streamed axis ``b`` appears as the chunk ``s_b`` or the subloop chunk
``u_b``; split matrix products introduce fresh parameters (``d1``,
``d2``, ...).  Unrolling the loop program reproduces the source diagram,
so every refinement step can be checked against the numeric oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from . import diagram as dg
from . import streaming

THREADS_PER_WARPGROUP = 128
COALESCE_BYTES = 128
KB = 1024

VAR_LEVELS = ("GMEM", "SMEM", "registers")
COLUMN_LEVELS = ("SMEM", "registers", "tensor-fragment")

#: bytes per value -> display name
QUANT_NAMES = {0.5: "FP4", 1: "FP8", 2: "FP16", 4: "FP32", 8: "FP64"}

#: legal staged-copy moves between variable levels (src, dst)
STAGE_PIPES = frozenset(
    {
        ("registers", "SMEM"),
        ("SMEM", "registers"),
        ("SMEM", "SMEM"),
    }
)

#: warn when the register slack per thread falls below this buffer
SPILL_GUARD_BYTES = 32


class PseudocodeError(ValueError):
    """Invalid loop program or configuration step."""


class FragmentOpError(PseudocodeError):
    """Operation not expressible on tensor-core fragments."""


class PipeError(PseudocodeError):
    """Data movement between levels with no connecting pipe."""


class DivisorError(PseudocodeError):
    """An axis size violates its combined divisor constraint."""

    def __init__(self, axis: str, required: int, actual: int, sources: Sequence[int]):
        self.axis = axis
        self.required = required
        self.actual = actual
        self.sources = tuple(sorted(set(sources)))
        super().__init__(
            f"axis {axis!r} size must be divisible by {required} "
            f"(lcm of {', '.join(str(s) for s in sorted(set(sources)))}), got {actual}"
        )


# ---------------------------------------------------------------------------
# program representation


@dataclass(frozen=True)
class PcVar:
    """One named array of the loop program."""

    symbol: str
    description: str
    shape: tuple[Any, ...]  # parameter names or integer literals
    level: str | None = None
    quant: float | None = None
    async_doubled: bool = False
    role: str = "intermediate"  # input | state | aux | intermediate | staged

    def shape_params(self) -> tuple[str, ...]:
        return tuple(t for t in self.shape if isinstance(t, str))


@dataclass(frozen=True)
class PcColumn:
    """One line of the loop program: a load, a compute step, a staged
    copy, state initialisation, or a store."""

    name: str
    kind: str  # load | init | compute | stage | store
    op: str | None = None
    reads: tuple[str, ...] = ()
    writes: tuple[str, ...] = ()
    level: str | None = None
    pipeline: str | None = None
    roles: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    delta_weave: bool = False
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "roles", dict(self.roles))
        object.__setattr__(self, "attrs", dict(self.attrs))


@dataclass(frozen=True)
class Subloop:
    """An accumulator region streaming chunk ``parent`` in pieces ``param``."""

    axis: str
    parent: str
    param: str
    columns: tuple[str, ...]

    def count(self, params: Mapping[str, int]) -> int:
        return params[self.parent] // params[self.param]


@dataclass(frozen=True)
class PseudocodeDiagram:
    """A streamed diagram re-expressed as an explicit loop program."""

    name: str
    source: dg.Diagram = field(repr=False)
    certificate: streaming.StreamabilityCertificate = field(repr=False)
    stream_axis: str
    chunk_param: str
    partition_axis: str | None
    params: Mapping[str, int]
    prologue: tuple[PcColumn, ...]
    body: tuple[PcColumn, ...]
    epilogue: tuple[PcColumn, ...]
    variables: Mapping[str, PcVar]
    subloops: tuple[Subloop, ...] = ()
    splittable: Mapping[str, Mapping[str, str]] = field(default_factory=dict)
    splits: Mapping[str, Mapping[str, str]] = field(default_factory=dict)
    divisors: Mapping[str, frozenset[int]] = field(default_factory=dict)
    assigned: bool = False
    barriers: tuple[Any, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "params", dict(self.params))
        object.__setattr__(self, "variables", dict(self.variables))
        object.__setattr__(
            self, "splittable", {k: dict(v) for k, v in self.splittable.items()}
        )
        object.__setattr__(self, "splits", {k: dict(v) for k, v in self.splits.items()})
        object.__setattr__(
            self, "divisors", {k: frozenset(v) for k, v in self.divisors.items()}
        )

    def columns(self) -> tuple[PcColumn, ...]:
        return self.prologue + self.body + self.epilogue

    def column(self, name: str) -> PcColumn:
        for c in self.columns():
            if c.name == name:
                return c
        raise PseudocodeError(f"no column named {name!r} in {self.name!r}")

    def section_of(self, name: str) -> str:
        for sec, cols in (
            ("prologue", self.prologue),
            ("body", self.body),
            ("epilogue", self.epilogue),
        ):
            if any(c.name == name for c in cols):
                return sec
        raise PseudocodeError(f"no column named {name!r} in {self.name!r}")

    def in_subloop(self, name: str) -> bool:
        return any(name in sl.columns for sl in self.subloops)

    def to_json(self) -> dict[str, Any]:
        def col(c: PcColumn) -> dict[str, Any]:
            return {
                "name": c.name,
                "kind": c.kind,
                "op": c.op,
                "reads": list(c.reads),
                "writes": list(c.writes),
                "level": c.level,
                "pipeline": c.pipeline,
                "roles": {k: list(v) for k, v in c.roles.items()},
                "delta_weave": c.delta_weave,
                "subloop": self.in_subloop(c.name),
            }

        return {
            "name": self.name,
            "stream_axis": self.stream_axis,
            "chunk_param": self.chunk_param,
            "partition_axis": self.partition_axis,
            "params": dict(self.params),
            "prologue": [col(c) for c in self.prologue],
            "body": [col(c) for c in self.body],
            "epilogue": [col(c) for c in self.epilogue],
            "variables": {
                s: {
                    "description": v.description,
                    "shape": list(v.shape),
                    "level": v.level,
                    "quant": v.quant,
                    "async_doubled": v.async_doubled,
                    "role": v.role,
                }
                for s, v in self.variables.items()
            },
            "subloops": [
                {
                    "axis": sl.axis,
                    "parent": sl.parent,
                    "param": sl.param,
                    "columns": list(sl.columns),
                    "count": sl.count(self.params),
                }
                for sl in self.subloops
            ],
            "splittable": {k: dict(v) for k, v in self.splittable.items()},
            "splits": {k: dict(v) for k, v in self.splits.items()},
            "divisors": {k: sorted(v) for k, v in self.divisors.items()},
        }


# ---------------------------------------------------------------------------
# step 1: loop expansion


def _partition_params(axis: str) -> tuple[str, str, str]:
    return f"g_{axis}", f"w_{axis}", f"t_{axis}"


def expand_loop(
    d: dg.Diagram,
    axis: str,
    s: int,
    partition: str | None = None,
    partition_width: int | None = None,
    names: Mapping[str, str] | None = None,
    descriptions: Mapping[str, str] | None = None,
) -> PseudocodeDiagram:
    """Expand a streamable diagram into an explicit loop program.

    ``axis`` is streamed in chunks of ``s``; ``partition`` optionally
    names the output axis tiled across warpgroups (slice width
    ``partition_width``).  The maintained state is initialised in the
    prologue as the accumulator of an empty stream, so the body is a
    pure update step and unrolling the loop reproduces the source
    diagram exactly.
    """
    names = dict(names or {})
    descriptions = dict(descriptions or {})
    stripped = dg.strip_relabels(d)
    cert = streaming.check_streamable(stripped, axis)
    if isinstance(cert, streaming.NotStreamable):
        raise PseudocodeError(f"cannot expand {d.name!r}: {cert.reason}")
    if not isinstance(s, int) or s < 1:
        raise PseudocodeError(f"chunk size must be a positive int, got {s!r}")

    sizes = stripped.axis_sizes()
    for a, v in sizes.items():
        if not isinstance(v, int):
            raise PseudocodeError(f"axis {a!r} has symbolic size {v!r}")
    if sizes[axis] % s != 0:
        raise PseudocodeError(
            f"chunk {s} must divide the {axis!r} extent {sizes[axis]}"
        )

    params: dict[str, int] = {}
    chunk_param = f"s_{axis}"
    params[chunk_param] = s
    part_terms: dict[str, str] = {}
    if partition is not None:
        if partition not in sizes:
            raise PseudocodeError(f"partition axis {partition!r} not in diagram")
        if partition == axis:
            raise PseudocodeError("cannot partition the streamed axis")
        g, w, t = _partition_params(partition)
        width = partition_width or min(sizes[partition], THREADS_PER_WARPGROUP)
        if sizes[partition] % width != 0:
            raise PseudocodeError(
                f"partition width {width} must divide the {partition!r} "
                f"extent {sizes[partition]}"
            )
        params[g] = sizes[partition]
        params[w] = width
        params[t] = max(width // THREADS_PER_WARPGROUP, 1)
        part_terms = {"group": g, "warp": w, "thread": t}
    for a, v in sizes.items():
        if a not in (axis, partition):
            params[a] = v

    def term_of_name(name: str) -> str:
        if name == axis:
            return chunk_param
        if partition is not None and name == partition:
            return part_terms["group"]
        return name

    def shape_of(seg: dg.ArrayShape) -> tuple[Any, ...]:
        return tuple(term_of_name(a.name) for a in seg.axes)

    variables: dict[str, PcVar] = {}

    def add_var(sym: str, shape: tuple[Any, ...], role: str, desc: str = "") -> str:
        sym = names.get(sym, sym)
        if sym not in variables:
            variables[sym] = PcVar(
                symbol=sym,
                description=descriptions.get(sym, desc),
                shape=shape,
                role=role,
            )
        return sym

    prologue: list[PcColumn] = []
    body: list[PcColumn] = []
    epilogue: list[PcColumn] = []

    kernel = streaming.registry()[cert.kernel]
    first_ci, last_ci = cert.region
    suffix = [tuple(k) for k in cert.suffix_nodes]
    far_level = stripped.input_column.segments[0].level

    # seed segment symbols from the diagram inputs
    seg_syms: list[str] = []
    for i, seg in enumerate(stripped.input_column.segments):
        seg_syms.append(add_var(f"I{i}", shape_of(seg), "input", f"input {i}"))

    # carried state: the accumulator over an empty stream
    y_sym = add_var("y", shape_of(cert.maintained[0]), "state", "maintained output")
    aux_sym: str | None = None
    if cert.auxiliary:
        aux_axes = tuple(term_of_name(a.name) for a in cert.auxiliary[0].axes)
        aux_sym = add_var(
            "aux", aux_axes + (len(cert.auxiliary),), "aux", "running auxiliary state"
        )

    def matmul_roles(
        first_axes: Sequence[str], second_axes: Sequence[str], out_axes: Sequence[str]
    ) -> dict[str, tuple[str, ...]]:
        first, second, out = set(first_axes), set(second_axes), set(out_axes)
        return {
            "m": tuple(
                term_of_name(a) for a in out_axes if a in first and a not in second
            ),
            "n": tuple(
                term_of_name(a) for a in out_axes if a in second and a not in first
            ),
            "k": tuple(term_of_name(a) for a in sorted((first & second) - out)),
        }

    compute_i = 0
    for ci in range(1, len(stripped.columns), 2):
        opcol = stripped.columns[ci]
        prev = stripped.columns[ci - 1]
        next_syms: list[str] = []
        for ni, node in enumerate(opcol):
            key = (ci, ni)
            outs = dg.node_io(node, prev)
            srcs = [seg_syms[t] for t in node.takes]
            touches = any(axis in prev.segments[t].axis_names() for t in node.takes)

            if node.kind == "identity":
                next_syms.extend(srcs)
                continue

            if node.kind == "transfer":
                sym = srcs[0]
                if node.attr("dst") == far_level:
                    epilogue.append(
                        PcColumn(name=f"store {sym}", kind="store", reads=(sym,))
                    )
                    next_syms.append(sym)
                    continue
                if not touches and part_terms:
                    # a partition-carrying tile is loaded per warpgroup slice
                    var = variables[sym]
                    if part_terms["group"] in var.shape:
                        variables[sym] = replace(
                            var,
                            shape=tuple(
                                part_terms["warp"] if x == part_terms["group"] else x
                                for x in var.shape
                            ),
                        )
                (body if touches else prologue).append(
                    PcColumn(name=f"load {sym}", kind="load", writes=(sym,))
                )
                next_syms.append(sym)
                continue

            roles: dict[str, tuple[str, ...]] = {}
            if node.kind in ("contraction", "matmul-add") and len(node.takes) == 2:
                roles = matmul_roles(
                    prev.segments[node.takes[0]].axis_names(),
                    prev.segments[node.takes[1]].axis_names(),
                    outs[0].axis_names(),
                )

            if suffix and key == suffix[0] and kernel.aux_indices:
                # running reduction head: per-chunk weights plus the
                # auxiliary state update
                p_sym = add_var(
                    "p", shape_of(outs[0]), "intermediate", "per-chunk weights"
                )
                body.append(
                    PcColumn(
                        name="exponent",
                        kind="compute",
                        op="softmax-unscaled",
                        reads=(srcs[0], aux_sym),
                        writes=(p_sym, aux_sym),
                    )
                )
                next_syms.append(p_sym)
                continue

            if suffix and key == suffix[-1]:
                if kernel.aux_indices:
                    acc_sym = add_var(
                        "acc", shape_of(outs[0]), "intermediate", "chunk output update"
                    )
                    body.append(
                        PcColumn(
                            name="combine",
                            kind="compute",
                            op="matmul-add",
                            reads=tuple(srcs),
                            writes=(acc_sym,),
                            roles=roles,
                        )
                    )
                    # fold the update in while rescaling the carry by the
                    # running delta (a per-row weave over the partition)
                    body.append(
                        PcColumn(
                            name="accumulate",
                            kind="compute",
                            op="add",
                            reads=(acc_sym, aux_sym, y_sym),
                            writes=(y_sym,),
                            delta_weave=True,
                        )
                    )
                else:
                    body.append(
                        PcColumn(
                            name="accumulate",
                            kind="compute",
                            op="matmul-add",
                            reads=tuple(srcs) + (y_sym,),
                            writes=(y_sym,),
                            roles=roles,
                        )
                    )
                next_syms.append(y_sym)
                continue

            # ordinary compute node
            out_syms = [
                add_var(
                    f"T{compute_i}" + (f".{j}" if len(outs) > 1 else ""),
                    shape_of(out),
                    "intermediate",
                    f"{node.kind} output",
                )
                for j, out in enumerate(outs)
            ]
            compute_i += 1
            col = PcColumn(
                name=f"compute {out_syms[0]}",
                kind="compute",
                op=node.kind,
                reads=tuple(srcs),
                writes=tuple(out_syms),
                roles=roles,
            )
            if touches:
                body.append(col)
            elif ci <= last_ci:
                prologue.append(col)  # hoisted: does not depend on the chunk
            else:
                epilogue.append(col)
            next_syms.extend(out_syms)
        seg_syms = next_syms

    if kernel.aux_indices:
        epilogue.insert(
            0,
            PcColumn(
                name="finalize",
                kind="compute",
                op="scale",
                reads=(y_sym, aux_sym),
                writes=(y_sym,),
                attrs={"reciprocal": True},
            ),
        )
    prologue.append(
        PcColumn(
            name="init state",
            kind="init",
            writes=(y_sym,) + ((aux_sym,) if aux_sym else ()),
            attrs={"values": list(kernel.init_values)},
        )
    )

    return PseudocodeDiagram(
        name=f"{d.name} loop",
        source=stripped,
        certificate=cert,
        stream_axis=axis,
        chunk_param=chunk_param,
        partition_axis=partition,
        params=params,
        prologue=tuple(prologue),
        body=tuple(body),
        epilogue=tuple(epilogue),
        variables=variables,
    )


def unroll(pc: PseudocodeDiagram) -> dg.Diagram:
    """Flatten the loop back into an explicit diagram (oracle-comparable
    with the source)."""
    return streaming.expand_certified(
        pc.source, pc.certificate, pc.params[pc.chunk_param]
    )


# ---------------------------------------------------------------------------
# step 2: subloops and linear splits


def find_subloops(
    pc: PseudocodeDiagram, chunks: Mapping[str, int] | None = None
) -> PseudocodeDiagram:
    """Annotate accumulator subloops and splittable matrix products.

    The accumulator at the heart of a streamed loop is itself
    streamable, so its columns can run over sub-chunks ``u_<axis>`` of
    the stream chunk (``chunks`` overrides the sub-chunk size per axis;
    the default equals the chunk, a single pass).  Every two-operand
    matrix product can be split along any of its axes and accumulated
    linearly; candidate split parameters are recorded per column.
    """
    chunks = dict(chunks or {})
    acc_names = tuple(
        c.name for c in pc.body if c.name in ("exponent", "combine", "accumulate")
    )
    subloops: list[Subloop] = []
    params = dict(pc.params)
    variables = dict(pc.variables)
    if acc_names:
        u_param = f"u_{pc.stream_axis}"
        s = params[pc.chunk_param]
        u = chunks.get(pc.stream_axis, s)
        if not isinstance(u, int) or u < 1 or u > s:
            raise PseudocodeError(
                f"subloop chunk for {pc.stream_axis!r} must be an int in "
                f"[1, {s}], got {u!r}"
            )
        if s % u != 0:
            raise PseudocodeError(f"subloop chunk {u} must divide the stream chunk {s}")
        params[u_param] = u
        subloops.append(
            Subloop(
                axis=pc.stream_axis,
                parent=pc.chunk_param,
                param=u_param,
                columns=acc_names,
            )
        )
        # arrays written inside the subloop only span the sub-chunk
        for name in acc_names:
            for sym in pc.column(name).writes:
                var = variables[sym]
                if var.role in ("state", "aux"):
                    continue
                variables[sym] = replace(
                    var,
                    shape=tuple(
                        u_param if x == pc.chunk_param else x for x in var.shape
                    ),
                )

    splittable: dict[str, dict[str, str]] = {}
    for c in pc.body:
        if c.op in ("contraction", "matmul-add") and c.roles:
            cand: dict[str, str] = {}
            for role_axes in c.roles.values():
                for a in role_axes:
                    base = a
                    for sl in subloops:
                        if a == sl.parent:
                            base = sl.axis
                    cand[a] = f"{base}1"
            splittable[c.name] = cand

    return replace(
        pc,
        params=params,
        variables=variables,
        subloops=tuple(subloops),
        splittable=splittable,
    )


# ---------------------------------------------------------------------------
# step 3: level assignment


@dataclass(frozen=True)
class ColumnAssign:
    column: str
    level: str
    quant: float
    pipeline: str | None = None
    async_load: bool = False


@dataclass(frozen=True)
class Stage:
    """A staged copy of ``source`` named ``symbol`` at another level.

    ``params`` introduces fresh shape parameters (further refinements of
    an existing parameter, e.g. a per-thread slice of a split axis).
    """

    source: str
    symbol: str
    level: str
    quant: float
    shape: tuple[Any, ...]
    description: str = ""
    params: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "params", dict(self.params))


@dataclass(frozen=True)
class Split:
    """Activate a linear split of a matrix product along ``axis``."""

    column: str
    axis: str
    param: str
    value: int


def assign_levels(
    pc: PseudocodeDiagram,
    assignment: "Sequence[ColumnAssign | Stage | Split] | Mapping[str, str]",
    quant: Mapping[str, float] | None = None,
) -> PseudocodeDiagram:
    """Place columns on memory levels and pipelines.

    ``assignment`` is either a mapping ``column -> level`` (with
    per-column byte widths passed in ``quant``) or an ordered sequence
    of ``ColumnAssign``, ``Stage`` and ``Split`` entries.  Tensor-core
    columns read operands from SMEM and write register accumulators;
    matrix products and element-wise maps run on fragments, but a
    rescale by the running delta weaved over the partition axis does
    not.  Each operand must exist at the consuming column's level,
    either directly or through a declared staged copy; staged copies
    move through SMEM.
    """
    if isinstance(assignment, Mapping):
        quant = dict(quant or {})
        entries: list[Any] = [
            ColumnAssign(col, lvl, quant.get(col, float(dg.DEFAULT_QUANT)))
            for col, lvl in assignment.items()
        ]
    else:
        entries = list(assignment)

    params = dict(pc.params)
    variables = dict(pc.variables)
    splits: dict[str, dict[str, str]] = {k: dict(v) for k, v in pc.splits.items()}
    col_assign: dict[str, ColumnAssign] = {}
    stages_after: dict[str, list[Stage]] = {}
    stage_params: set[str] = set()
    declared_stage_syms: set[str] = set()

    for e in entries:
        if isinstance(e, ColumnAssign):
            pc.column(e.column)  # existence check
            if e.level not in COLUMN_LEVELS:
                raise PseudocodeError(
                    f"column level must be one of {COLUMN_LEVELS}, got {e.level!r}"
                )
            col_assign[e.column] = e
        elif isinstance(e, Split):
            cand = pc.splittable.get(e.column)
            if cand is None or e.axis not in cand:
                raise PseudocodeError(
                    f"column {e.column!r} has no splittable axis {e.axis!r}; "
                    f"candidates: {sorted(cand) if cand else 'none'}"
                )
            parent_value = params[e.axis]
            if not isinstance(e.value, int) or e.value < 1 or e.value > parent_value:
                raise PseudocodeError(
                    f"split {e.param}={e.value} must be an int in [1, {parent_value}]"
                )
            # divisibility of the parent axis is checked by apply_divisors
            params[e.param] = e.value
            splits.setdefault(e.column, {})[e.axis] = e.param
        elif isinstance(e, Stage):
            if e.source not in variables and e.source not in declared_stage_syms:
                raise PseudocodeError(f"stage source {e.source!r} is not a variable")
            if e.level not in ("SMEM", "registers"):
                raise PseudocodeError(
                    f"staged copies live in SMEM or registers, not {e.level!r}"
                )
            for p, v in e.params.items():
                if not isinstance(v, int) or v < 1:
                    raise PseudocodeError(f"stage parameter {p}={v!r} must be >= 1")
                params[p] = v
                stage_params.add(p)
            for term in e.shape:
                if isinstance(term, str) and term not in params:
                    raise PseudocodeError(
                        f"stage {e.symbol!r} uses unknown parameter {term!r}"
                    )
            stages_after.setdefault(e.source, []).append(e)
            declared_stage_syms.add(e.symbol)
        else:
            raise PseudocodeError(f"unknown assignment entry {e!r}")

    part = (
        _partition_params(pc.partition_axis) if pc.partition_axis is not None else None
    )

    def substitutable(src_terms: set, term: Any) -> bool:
        """A staged shape term must be the source term or a partition,
        chunk or split refinement of one."""
        if isinstance(term, int) or term in src_terms or term in stage_params:
            return True
        families: list[set] = []
        if part is not None:
            families.append(set(part))
        for sl in pc.subloops:
            families.append({sl.parent, sl.param})
        for col_splits in splits.values():
            for a, p in col_splits.items():
                families.append({a, p})
        return any(term in fam and src_terms & fam for fam in families)

    def refine_partition(shape: tuple[Any, ...], level: str) -> tuple[Any, ...]:
        if part is None:
            return shape
        g, w, t = part
        if level == "tensor-fragment":
            return tuple(w if x in (g, t) else x for x in shape)
        if level == "registers":
            return tuple(t if x in (g, w) else x for x in shape)
        return shape

    def apply_split(shape: tuple[Any, ...], col: str) -> tuple[Any, ...]:
        mapping = splits.get(col, {})
        return tuple(mapping.get(x, x) if isinstance(x, str) else x for x in shape)

    def var_level(sym: str) -> str:
        lvl = variables[sym].level
        return lvl if lvl is not None else "GMEM"

    copies: dict[str, list[str]] = {}  # symbol -> staged copies, declaration order

    def chain_of(sym: str) -> list[str]:
        out = [sym]
        for c in copies.get(sym, []):
            out.extend(chain_of(c))
        return out

    def operand_at(sym: str, want: str, column: str) -> str:
        """Pick ``sym`` or its most recently staged copy at level ``want``."""
        chain = chain_of(sym)
        for cand in reversed(chain):
            if var_level(cand) == want:
                return cand
        raise PipeError(
            f"column {column!r} needs operand {sym!r} at {want}, but it only "
            f"exists at {', '.join(sorted({var_level(c) for c in chain}))}; "
            f"declare a staged copy (tensor cores read operands from SMEM)"
        )

    def emit_stages(sym: str, out: list[PcColumn]) -> None:
        for st in stages_after.pop(sym, []):
            src_var = variables[sym]
            if src_var.level is None:
                raise PseudocodeError(
                    f"stage {st.symbol!r}: source {sym!r} has no level yet"
                )
            if (src_var.level, st.level) not in STAGE_PIPES:
                raise PipeError(
                    f"no pipe from {src_var.level} to {st.level} for staged "
                    f"copy {st.symbol!r}; moves go through SMEM"
                )
            src_terms = set(src_var.shape_params())
            for term in st.shape:
                if not substitutable(src_terms, term):
                    raise PseudocodeError(
                        f"stage {st.symbol!r} shape term {term!r} is unrelated "
                        f"to source shape {src_var.shape}"
                    )
            variables[st.symbol] = PcVar(
                symbol=st.symbol,
                description=st.description or f"staged copy of {sym}",
                shape=tuple(st.shape),
                level=st.level,
                quant=st.quant,
                role="staged",
            )
            copies.setdefault(sym, []).append(st.symbol)
            out.append(
                PcColumn(
                    name=f"stage {st.symbol}",
                    kind="stage",
                    reads=(sym,),
                    writes=(st.symbol,),
                    level=st.level,
                )
            )
            emit_stages(st.symbol, out)

    new_sections: dict[str, tuple[PcColumn, ...]] = {}
    for sec_name, cols in (
        ("prologue", pc.prologue),
        ("body", pc.body),
        ("epilogue", pc.epilogue),
    ):
        out: list[PcColumn] = []
        for c in cols:
            a = col_assign.get(c.name)
            if c.kind == "load":
                if a is None:
                    raise PseudocodeError(f"load column {c.name!r} has no assignment")
                if a.level not in ("SMEM", "registers"):
                    raise PipeError(
                        f"load {c.name!r}: data arrives from GMEM into SMEM or "
                        f"registers, not {a.level!r}"
                    )
                sym = c.writes[0]
                variables[sym] = replace(
                    variables[sym],
                    level=a.level,
                    quant=a.quant,
                    async_doubled=a.async_load,
                )
                out.append(replace(c, level=a.level, pipeline=a.pipeline))
                emit_stages(sym, out)
            elif c.kind == "store":
                sym = c.reads[0]
                if var_level(sym) not in ("SMEM", "registers"):
                    raise PipeError(
                        f"store {c.name!r}: source {sym!r} is at {var_level(sym)}"
                    )
                out.append(replace(c, level="GMEM"))
            elif c.kind == "compute":
                if a is None:
                    raise PseudocodeError(
                        f"compute column {c.name!r} has no level assignment"
                    )
                if a.level == "tensor-fragment":
                    if c.delta_weave:
                        raise FragmentOpError(
                            f"column {c.name!r} rescales the carry by the "
                            f"running delta weaved over the partition axis; "
                            f"tensor cores cannot apply per-row scales"
                        )
                    if c.op not in ("contraction", "matmul-add", "elementwise"):
                        raise FragmentOpError(
                            f"column {c.name!r} ({c.op}) cannot run on tensor "
                            f"cores; only matrix products and element-wise maps"
                        )
                reads = []
                want = "SMEM" if a.level == "tensor-fragment" else a.level
                for sym in c.reads:
                    if variables[sym].role in ("state", "aux"):
                        reads.append(sym)  # carried state lives with its updater
                    else:
                        reads.append(operand_at(sym, want, c.name))
                out_level = "registers" if a.level == "tensor-fragment" else a.level
                for sym in c.writes:
                    var = variables[sym]
                    variables[sym] = replace(
                        var,
                        level=out_level,
                        quant=a.quant,
                        shape=apply_split(refine_partition(var.shape, a.level), c.name),
                    )
                out.append(
                    replace(c, reads=tuple(reads), level=a.level, pipeline=a.pipeline)
                )
                for sym in c.writes:
                    emit_stages(sym, out)
            else:
                out.append(c)
        new_sections[sec_name] = tuple(out)

    leftover = [st.symbol for ss in stages_after.values() for st in ss]
    if leftover:
        raise PseudocodeError(
            f"staged copies never produced (source never written?): {leftover}"
        )

    return replace(
        pc,
        params=params,
        variables=variables,
        splits=splits,
        prologue=new_sections["prologue"],
        body=new_sections["body"],
        epilogue=new_sections["epilogue"],
        assigned=True,
    )


# ---------------------------------------------------------------------------
# step 4: divisor constraints


def _lcm(values: Iterable[int]) -> int:
    out = 1
    for v in values:
        out = math.lcm(out, v)
    return out


def apply_divisors(
    pc: PseudocodeDiagram,
    constraints: Mapping[str, Iterable[int]] | None = None,
    catalog: Any = None,
) -> PseudocodeDiagram:
    """Collect divisor constraints and check the configured sizes.

    Three rules run automatically: GMEM<->SMEM transfers move whole
    coalesced lines, so the lowermost axis of each loaded or stored
    array must cover 128 bytes; warpgroup-partitioned axes are divisible
    by the warpgroup width whenever tensor cores are in play; and
    tensor-core operand axes take the per-pipeline ``m``/``n``/``k``
    divisors published in the catalog.  ``constraints`` adds explicit
    divisors per parameter.  All divisors on one parameter combine by
    least common multiple, and every constrained concrete size must be
    divisible by the combined value, so adding constraints can only
    tighten the requirement, never relax it.
    """
    if not pc.assigned:
        raise PseudocodeError("assign_levels must run before apply_divisors")
    div: dict[str, set[int]] = {k: set(v) for k, v in pc.divisors.items()}

    def add(param: Any, d: int) -> None:
        if isinstance(param, str) and d > 1:
            div.setdefault(param, set()).add(int(d))

    # coalescing on GMEM<->SMEM moves
    for c in pc.columns():
        if c.kind == "load":
            sym = c.writes[0]
        elif c.kind == "store":
            sym = c.reads[0]
        else:
            continue
        var = pc.variables[sym]
        if var.quant and var.shape:
            add(var.shape[-1], int(COALESCE_BYTES / var.quant))

    # warpgroup partitioning
    if pc.partition_axis is not None and any(
        c.level == "tensor-fragment" for c in pc.columns()
    ):
        g, w, _ = _partition_params(pc.partition_axis)
        add(g, THREADS_PER_WARPGROUP)
        add(w, THREADS_PER_WARPGROUP)

    # tensor-core operand shapes from the catalog
    tensor_div: Mapping[str, Mapping[str, int]] = {}
    if catalog is not None:
        tensor_div = catalog.pipelines.get("tensor_divisors", {})
    part = (
        _partition_params(pc.partition_axis) if pc.partition_axis is not None else None
    )
    for c in pc.columns():
        if c.level != "tensor-fragment" or not c.roles or not c.pipeline:
            continue
        rules = tensor_div.get(c.pipeline)
        if not rules:
            continue
        for role, axes in c.roles.items():
            if role not in rules:
                continue
            for a in axes:
                term = pc.splits.get(c.name, {}).get(a, a)
                if pc.in_subloop(c.name):
                    for sl in pc.subloops:
                        if term == sl.parent:
                            term = sl.param
                if part is not None and term == part[0]:
                    term = part[1]  # operands are per-warpgroup slices
                add(term, int(rules[role]))

    # an active split is a divisibility requirement on its parent axis
    for mapping in pc.splits.values():
        for axis, param in mapping.items():
            add(axis, pc.params[param])

    for param, ds in (constraints or {}).items():
        for d in ds:
            add(param, int(d))

    # validation: every constrained parameter with a concrete value
    for param, ds in sorted(div.items()):
        value = pc.params.get(param)
        if value is None:
            continue
        need = _lcm(ds)
        if value % need != 0:
            raise DivisorError(param, need, value, sorted(ds))

    return replace(pc, divisors={k: frozenset(v) for k, v in div.items()})


# ---------------------------------------------------------------------------
# step 5: variable table and configuration table


@dataclass(frozen=True)
class VariableRow:
    symbol: str
    description: str
    shape_text: str
    quant: float
    quant_name: str
    level: str
    scope: str  # threadblock | warpgroup
    async_doubled: bool
    bytes_tb: int | float
    bytes_wg: int | float

    def to_json(self) -> dict[str, Any]:
        return {
            "symbol": self.symbol,
            "description": self.description,
            "shape": self.shape_text,
            "quant": self.quant,
            "quant_name": self.quant_name,
            "level": self.level,
            "scope": self.scope,
            "async_doubled": self.async_doubled,
            "bytes_tb": self.bytes_tb,
            "bytes_wg": self.bytes_wg,
        }


def _shape_text(pc: PseudocodeDiagram, shape: tuple[Any, ...]) -> str:
    parts = []
    for t in shape:
        if isinstance(t, int):
            parts.append(str(t))
        else:
            ds = pc.divisors.get(t)
            parts.append(f"{t}^({_lcm(ds)})" if ds else t)
    return " x ".join(parts)


def _int_if_exact(x: float) -> int | float:
    return int(x) if float(x).is_integer() else x


def variable_table(pc: PseudocodeDiagram) -> list[VariableRow]:
    """One row per simultaneously-live array, with per-level byte sizes.

    A variable is live from its first to its last mention; anything
    touched inside the loop body stays live across the whole body,
    because overlapped iterations keep neighbouring copies in flight.
    Variables at the same level and scope whose live ranges never meet
    share one allocation and merge into a single row.
    """
    if not pc.assigned:
        raise PseudocodeError("assign_levels must run before variable_table")
    cols = pc.columns()
    body_lo = len(pc.prologue)
    body_hi = body_lo + len(pc.body) - 1

    first: dict[str, int] = {}
    last: dict[str, int] = {}
    for i, c in enumerate(cols):
        for sym in (*c.reads, *c.writes):
            first.setdefault(sym, i)
            last[sym] = i
    body_syms = {s for c in pc.body for s in (*c.reads, *c.writes)}
    for sym in body_syms:
        first[sym] = min(first[sym], body_lo)
        last[sym] = max(last[sym], body_hi)

    part = (
        _partition_params(pc.partition_axis) if pc.partition_axis is not None else None
    )

    def scoped(var: PcVar) -> str:
        if part is not None and any(t in part for t in var.shape_params()):
            return "warpgroup"
        return "threadblock"

    def nbytes(var: PcVar, per_wg: bool) -> int | float:
        total = float(var.quant if var.quant is not None else dg.DEFAULT_QUANT)
        for t in var.shape:
            if isinstance(t, int):
                total *= t
            elif part is not None and per_wg and t in part:
                # one warpgroup's slice: the group tile collapses to the
                # warp slice, and per-thread rows exist once per thread
                total *= pc.params[part[1]]
            else:
                total *= pc.params[t]
        if var.async_doubled:
            total *= 2
        return _int_if_exact(total)

    items = [
        (sym, var)
        for sym, var in pc.variables.items()
        if sym in first and var.level not in (None, "GMEM")
    ]
    items.sort(key=lambda kv: first[kv[0]])

    # greedy allocation sharing per (level, scope)
    buckets: dict[tuple[str, str], list[list[tuple[str, PcVar]]]] = {}
    for sym, var in items:
        allocs = buckets.setdefault((var.level, scoped(var)), [])
        for alloc in allocs:
            if all(last[s] < first[sym] or last[sym] < first[s] for s, _ in alloc):
                alloc.append((sym, var))
                break
        else:
            allocs.append([(sym, var)])

    rows: list[VariableRow] = []
    for (level, scope), allocs in buckets.items():
        for alloc in allocs:
            per_wg = scope == "warpgroup"
            main = max(alloc, key=lambda kv: nbytes(kv[1], per_wg))[1]
            rows.append(
                VariableRow(
                    symbol="/".join(s for s, _ in alloc),
                    description=" / ".join(v.description for _, v in alloc),
                    shape_text=_shape_text(pc, main.shape),
                    quant=main.quant,
                    quant_name=QUANT_NAMES.get(main.quant, f"{main.quant}B"),
                    level=level,
                    scope=scope,
                    async_doubled=main.async_doubled,
                    bytes_tb=0 if per_wg else nbytes(main, False),
                    bytes_wg=nbytes(main, True) if per_wg else 0,
                )
            )
    rows.sort(key=lambda r: first[r.symbol.split("/", 1)[0]])
    return rows


@dataclass(frozen=True)
class LevelBudget:
    level: str
    m_max: int | float
    m_tb: int | float
    m_wg: int | float
    n_max: float
    n_max_floor: int
    excess_tb: int | float
    excess_wg: float
    excess_thread: float


@dataclass(frozen=True)
class ConfigTable:
    rows: tuple[VariableRow, ...]
    budgets: tuple[LevelBudget, ...]
    n: int
    notes: tuple[str, ...]
    feasible: bool

    def budget(self, level: str) -> LevelBudget:
        for b in self.budgets:
            if b.level == level:
                return b
        raise PseudocodeError(f"no budget for level {level!r}")

    def to_json(self) -> dict[str, Any]:
        return {
            "rows": [r.to_json() for r in self.rows],
            "totals": {
                b.level: {"m_max": b.m_max, "m_tb": b.m_tb, "m_wg": b.m_wg}
                for b in self.budgets
            },
            "n": self.n,
            "n_max": {
                b.level: {"real": b.n_max, "floor": b.n_max_floor}
                for b in self.budgets
            },
            "excess": {
                b.level: {
                    "per_threadblock": b.excess_tb,
                    "per_warpgroup": b.excess_wg,
                    "per_thread": b.excess_thread,
                }
                for b in self.budgets
            },
            "notes": list(self.notes),
            "feasible": self.feasible,
        }

    def to_text(self) -> str:
        head = ["Var", "Description", "Size", "Q.", "Level", "M_TB (B)", "M_WG (B)"]
        table = [head]
        for r in self.rows:
            tb = f"{r.bytes_tb}" + ("*" if r.async_doubled else "")
            table.append(
                [
                    r.symbol,
                    r.description,
                    r.shape_text,
                    r.quant_name,
                    r.level,
                    tb if r.scope == "threadblock" else "",
                    f"{r.bytes_wg}" if r.scope == "warpgroup" else "",
                ]
            )
        for b in self.budgets:
            table.append(
                [
                    "",
                    "total",
                    "",
                    "",
                    b.level,
                    f"{b.m_tb / KB:g} KB",
                    f"{b.m_wg / KB:g} KB",
                ]
            )
        widths = [max(len(row[i]) for row in table) for i in range(len(head))]
        lines = [
            "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
            for row in table
        ]
        lines.append("")
        head2 = [
            "Level",
            "M_max (KB)",
            "M_TB (KB)",
            "M_WG (KB)",
            "N_max",
            f"excess @N={self.n} (KB/TB)",
            "(KB/WG)",
            "(B/thread)",
        ]
        t2 = [head2]
        for b in self.budgets:
            t2.append(
                [
                    b.level,
                    f"{b.m_max / KB:g}",
                    f"{b.m_tb / KB:g}",
                    f"{b.m_wg / KB:g}",
                    f"{b.n_max:.2f}",
                    f"{b.excess_tb / KB:g}",
                    f"{b.excess_wg / KB:.2f}",
                    f"{b.excess_thread:.0f}",
                ]
            )
        w2 = [max(len(row[i]) for row in t2) for i in range(len(head2))]
        lines.extend(
            "  ".join(cell.ljust(w) for cell, w in zip(row, w2)).rstrip() for row in t2
        )
        if self.notes:
            lines.append("")
            lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def config_table(
    rows: Sequence[VariableRow],
    hw: Any,
    n: int | None = None,
    level_map: Mapping[str, str] | None = None,
) -> ConfigTable:
    """Per-level totals, the warpgroup headroom N_max = (M_max - M_TB) /
    M_WG, and the memory slack at the chosen warpgroup count ``n``
    (default: the largest count every level can hold)."""
    level_map = dict(level_map or {"SMEM": "smem", "registers": "rmem"})
    levels = sorted({r.level for r in rows}, key=lambda lv: (lv != "SMEM", lv))
    prelim: list[tuple[str, float, float, float, float]] = []
    for level in levels:
        hw_name = level_map.get(level)
        if hw_name is None:
            raise PseudocodeError(
                f"no catalog level mapped for {level!r}; pass level_map"
            )
        m_max = hw.level(hw_name).bytes
        if m_max is None:
            raise PseudocodeError(f"catalog level {hw_name!r} has no capacity")
        m_tb = sum(r.bytes_tb for r in rows if r.level == level)
        m_wg = sum(r.bytes_wg for r in rows if r.level == level)
        if m_wg <= 0:
            raise PseudocodeError(f"level {level!r} has no per-warpgroup memory")
        prelim.append((level, m_max, m_tb, m_wg, (m_max - m_tb) / m_wg))
    if n is None:
        n = max(int(math.floor(min(p[4] for p in prelim))), 1)

    budgets: list[LevelBudget] = []
    notes: list[str] = []
    for level, m_max, m_tb, m_wg, n_max in prelim:
        excess_tb = m_max - m_tb - n * m_wg
        excess_wg = excess_tb / n
        excess_thread = excess_wg / THREADS_PER_WARPGROUP
        budgets.append(
            LevelBudget(
                level=level,
                m_max=_int_if_exact(m_max),
                m_tb=_int_if_exact(m_tb),
                m_wg=_int_if_exact(m_wg),
                n_max=n_max,
                n_max_floor=int(math.floor(n_max)),
                excess_tb=_int_if_exact(excess_tb),
                excess_wg=excess_wg,
                excess_thread=excess_thread,
            )
        )
        if excess_tb < 0:
            notes.append(
                f"{level}: {n} warpgroups exceed capacity by {-excess_tb:g} bytes"
            )
        elif level == "registers" and excess_thread < SPILL_GUARD_BYTES:
            notes.append(
                f"registers: only {excess_thread:.0f} spare bytes per thread "
                f"(under {SPILL_GUARD_BYTES}); spills likely"
            )
    feasible = all(b.excess_tb >= 0 for b in budgets)
    return ConfigTable(tuple(rows), tuple(budgets), n, tuple(notes), feasible)


# ---------------------------------------------------------------------------
# the worked single-head attention plan


ATTENTION_DEFAULTS: dict[str, int] = {
    "w_q": 128,
    "s_x": 64,
    "u_x": 64,
    "d": 128,
    "d1": 32,
    "d2": 8,
    "n_wg": 3,
    "x_chunks": 2,
}

ATTENTION_NAMES = {
    "I0": "Q",
    "I1": "K",
    "I2": "V",
    "T0": "S",
    "p": "P'",
    "acc": "D",
    "y": "O'",
    "aux": "alpha",
}

ATTENTION_DESCRIPTIONS = {
    "Q": "query tile",
    "K": "key block",
    "V": "value block",
    "S": "attention scores",
    "P'": "weighted scores (registers)",
    "D": "delta output (tensor core)",
    "O'": "output accumulator",
    "alpha": "running max, delta, normalizer",
}


def attention_plan(
    config: Mapping[str, int | float] | None = None,
    catalog: Any = None,
) -> PseudocodeDiagram:
    """Run the five planning steps on the canonical attention diagram.

    ``config`` overrides the default warp-specialised configuration
    (``w_q``, ``s_x``, ``u_x``, ``d``, ``d1``, ``d2``, ``n_wg``,
    ``x_chunks``, plus the byte widths ``quant_q``, ``quant_k``,
    ``quant_v``, ``quant_p``).  The returned program has levels, staged
    copies, splits and divisors applied; feed it to ``variable_table``
    and ``config_table`` for the memory analysis.
    """
    from .library import canonical_attention

    cfg = dict(ATTENTION_DEFAULTS)
    quants: dict[str, float] = {"q": 1, "k": 1, "v": 2, "p": 1}
    pipes = {"qk": "tensor_fp8", "pv": "tensor_fp16"}
    for key, val in (config or {}).items():
        if key in cfg:
            cfg[key] = int(val)
        elif key.startswith("quant_") and key[6:] in quants:
            quants[key[6:]] = float(val)
        elif key.startswith("pipeline_") and key[9:] in pipes:
            pipes[key[9:]] = str(val)
        else:
            raise PseudocodeError(
                f"unknown configuration key {key!r}; expected one of "
                f"{sorted(cfg) + sorted('quant_' + q for q in quants) + sorted('pipeline_' + p for p in pipes)}"
            )

    g_q = cfg["n_wg"] * cfg["w_q"]
    x_total = cfg["x_chunks"] * cfg["s_x"]
    d0 = canonical_attention(q=g_q, x=x_total, d=cfg["d"])
    pc = expand_loop(
        d0,
        axis="x",
        s=cfg["s_x"],
        partition="q",
        partition_width=cfg["w_q"],
        names=ATTENTION_NAMES,
        descriptions=ATTENTION_DESCRIPTIONS,
    )
    pc = find_subloops(pc, chunks={"x": cfg["u_x"]})
    assignment = [
        ColumnAssign("load Q", "SMEM", quants["q"]),
        ColumnAssign("load K", "SMEM", quants["k"], async_load=True),
        ColumnAssign("load V", "SMEM", quants["v"], async_load=True),
        ColumnAssign("compute S", "tensor-fragment", 2, pipeline=pipes["qk"]),
        ColumnAssign("exponent", "registers", 2, pipeline="sfu"),
        Stage("P'", "P", "SMEM", 2, ("g_q", "s_x"), "weighted scores (shared)"),
        Stage(
            "P",
            "A",
            "SMEM",
            quants["p"],
            ("w_q", "u_x"),
            "weighted scores (tensor core operand)",
        ),
        Split("combine", "d", "d1", cfg["d1"]),
        ColumnAssign("combine", "tensor-fragment", 2, pipeline=pipes["pv"]),
        Stage("D", "dO", "SMEM", 2, ("g_q", "d1"), "delta output (shared)"),
        Stage(
            "dO",
            "dO'",
            "registers",
            2,
            ("t_q", "d2"),
            "delta output (per thread)",
            params={"d2": cfg["d2"]},
        ),
        ColumnAssign("accumulate", "registers", 2, pipeline="fp16"),
        ColumnAssign("finalize", "registers", 2, pipeline="sfu"),
    ]
    pc = assign_levels(pc, assignment)
    pc = apply_divisors(pc, catalog=catalog)
    return pc
