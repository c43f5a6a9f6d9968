"""Core dataflow-diagram representation.

A diagram is an alternating sequence of data columns and operation columns.
A data column is a tuple of array segments (the dashed-line tuple components);
each segment lists its axes, its memory-level tag and its quantization in
bytes per value.  An operation column is a tuple of nodes; every segment of
the preceding data column is consumed by exactly one node (``takes`` wires
segments to nodes, in any order, which is how crossing wires are expressed).

Nodes are either primitives applied under a stack of weaves (map over a
labeled axis, broadcasting non-targeted inputs), level transfers, identities,
or composites wrapping an inner diagram.  Shapes of all intermediate columns
are derivable from the input column, and ``validate`` checks a stored diagram
against that derivation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from ._symbols import SizeLike, to_expr

JSON_VERSION = 1

DEFAULT_QUANT = 4

PRIMITIVE_KINDS = frozenset(
    {
        "contraction",
        "matmul-add",
        "softmax",
        "softmax-unscaled",
        "softmax-auxiliary",
        "elementwise",
        "add",
        "multiply",
        "max",
        "exp",
        "scale",
        "copy",
        "split",
        "join",
        "const",
        "drop",
    }
)
NODE_KINDS = PRIMITIVE_KINDS | {"transfer", "identity", "composite"}

# Kinds whose behaviour is independent of the exact shape: they pass, copy,
# slice or move whole segments and need no weave annotations of their own.
SHAPE_GENERIC_KINDS = frozenset(
    {"identity", "transfer", "copy", "split", "join", "drop", "const"}
)

SOFTMAX_STATE = ("mu", "delta", "z")


class DiagramError(ValueError):
    """Structural problem in a diagram."""


@dataclass(frozen=True)
class Axis:
    """A labeled wire: name, size (int or parameter name), divisor set."""

    name: str
    size: int | str
    divisors: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        if isinstance(self.size, int) and self.size < 1:
            raise DiagramError(f"axis {self.name!r} must have size >= 1, got {self.size}")
        if not isinstance(self.divisors, frozenset):
            object.__setattr__(self, "divisors", frozenset(self.divisors))

    def with_size(self, size: int | str) -> "Axis":
        return replace(self, size=size)

    @property
    def size_expr(self):
        return to_expr(self.size)


@dataclass(frozen=True)
class ArrayShape:
    """One segment of a data column."""

    axes: tuple[Axis, ...]
    level: str
    quant: float = DEFAULT_QUANT

    def __post_init__(self) -> None:
        object.__setattr__(self, "axes", tuple(self.axes))
        names = [a.name for a in self.axes]
        if len(set(names)) != len(names):
            raise DiagramError(f"duplicate axis names in segment: {names}")

    def axis_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.axes)

    def count(self):
        out = to_expr(1)
        for a in self.axes:
            out = out * a.size_expr
        return out

    def bytes(self):
        from fractions import Fraction

        return self.count() * to_expr(Fraction(self.quant))

    def find_axis(self, name: str) -> int:
        for i, a in enumerate(self.axes):
            if a.name == name:
                return i
        raise DiagramError(f"axis {name!r} not present in segment {self.axis_names()}")


@dataclass(frozen=True)
class DataColumn:
    segments: tuple[ArrayShape, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))

    def __len__(self) -> int:
        return len(self.segments)


@dataclass(frozen=True)
class Weave:
    """Map a node over ``axis``; ``targets`` are node-input indices that carry
    the axis (at ``positions``), every node output gains it at ``out_positions``."""

    axis: Axis
    targets: tuple[int, ...]
    positions: tuple[int, ...] = ()
    out_positions: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "targets", tuple(self.targets))
        if not self.positions:
            object.__setattr__(self, "positions", tuple(0 for _ in self.targets))
        if len(self.positions) != len(self.targets):
            raise DiagramError("weave positions must parallel targets")

    def out_position(self, j: int) -> int:
        if not self.out_positions:
            return 0
        return self.out_positions[j] if j < len(self.out_positions) else 0


@dataclass(frozen=True)
class Relabel:
    """Group or stream annotation on an axis at the level it enters."""

    axis: str
    kind: str  # "group" | "stream"
    size: int | str
    maintained: tuple[ArrayShape, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("group", "stream"):
            raise DiagramError(f"relabel kind must be group or stream, got {self.kind!r}")


def freeze_attrs(attrs: Mapping[str, Any] | Iterable[tuple[str, Any]]) -> tuple[tuple[str, Any], ...]:
    items = attrs.items() if isinstance(attrs, Mapping) else attrs
    return tuple(sorted(items, key=lambda kv: kv[0]))


@dataclass(frozen=True)
class OpNode:
    kind: str
    takes: tuple[int, ...]
    weaves: tuple[Weave, ...] = ()
    relabels: tuple[Relabel, ...] = ()
    attrs: tuple[tuple[str, Any], ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in NODE_KINDS:
            raise DiagramError(f"unknown node kind {self.kind!r}")
        object.__setattr__(self, "takes", tuple(self.takes))
        object.__setattr__(self, "weaves", tuple(self.weaves))
        object.__setattr__(self, "relabels", tuple(self.relabels))
        if isinstance(self.attrs, Mapping):
            object.__setattr__(self, "attrs", freeze_attrs(self.attrs))
        else:
            object.__setattr__(self, "attrs", tuple(self.attrs))

    def attr(self, name: str, default: Any = None) -> Any:
        for k, v in self.attrs:
            if k == name:
                return v
        return default

    def with_attrs(self, **kw: Any) -> "OpNode":
        d = dict(self.attrs)
        d.update(kw)
        return replace(self, attrs=freeze_attrs(d))


OpColumn = tuple  # tuple[OpNode, ...]


def identity(take: int) -> OpNode:
    return OpNode("identity", (take,))


def transfer(take: int, src: str, dst: str) -> OpNode:
    return OpNode("transfer", (take,), attrs={"src": src, "dst": dst})


def prim(kind: str, takes: Sequence[int], weaves: Sequence[Weave] = (), **attrs: Any) -> OpNode:
    return OpNode(kind, tuple(takes), tuple(weaves), attrs=freeze_attrs(attrs))


@dataclass(frozen=True)
class Diagram:
    """Alternating data / op columns; first and last columns are data."""

    name: str
    columns: tuple[Any, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def input_column(self) -> DataColumn:
        return self.columns[0]

    @property
    def output_column(self) -> DataColumn:
        return self.columns[-1]

    def data_columns(self) -> list[DataColumn]:
        return [c for c in self.columns if isinstance(c, DataColumn)]

    def op_columns(self) -> list[tuple[OpNode, ...]]:
        return [c for c in self.columns if not isinstance(c, DataColumn)]

    def iter_nodes(self):
        for ci, col in enumerate(self.columns):
            if not isinstance(col, DataColumn):
                for ni, node in enumerate(col):
                    yield ci, ni, node

    def params(self) -> tuple[str, ...]:
        names: set[str] = set()
        for col in self.columns:
            if isinstance(col, DataColumn):
                for seg in col.segments:
                    for a in seg.axes:
                        if isinstance(a.size, str):
                            names.add(a.size)
        for _, _, node in self.iter_nodes():
            for r in node.relabels:
                if isinstance(r.size, str):
                    names.add(r.size)
        return tuple(sorted(names))

    def relabel_map(self) -> dict[str, Relabel]:
        out: dict[str, Relabel] = {}
        for _, _, node in self.iter_nodes():
            for r in node.relabels:
                if r.axis in out:
                    raise DiagramError(f"axis {r.axis!r} relabeled more than once")
                out[r.axis] = r
        return out

    def axis_sizes(self) -> dict[str, int | str]:
        sizes: dict[str, int | str] = {}
        for col in self.columns:
            if isinstance(col, DataColumn):
                for seg in col.segments:
                    for a in seg.axes:
                        sizes.setdefault(a.name, a.size)
        return sizes


# ---------------------------------------------------------------------------
# shape inference


def _strip_weaves(node: OpNode, shapes: list[ArrayShape]) -> list[ArrayShape]:
    shapes = list(shapes)
    for w in node.weaves:
        for t, p in zip(w.targets, w.positions):
            if t >= len(shapes):
                raise DiagramError(
                    f"{node.kind}: weave target {t} out of range for {len(shapes)} inputs"
                )
            seg = shapes[t]
            if p >= len(seg.axes) or seg.axes[p].name != w.axis.name:
                raise DiagramError(
                    f"{node.kind}: weave axis {w.axis.name!r} not at position {p} "
                    f"of input {t} (axes {seg.axis_names()})"
                )
            shapes[t] = replace(seg, axes=seg.axes[:p] + seg.axes[p + 1 :])
    return shapes


def _apply_weaves(node: OpNode, shapes: list[ArrayShape]) -> list[ArrayShape]:
    for w in reversed(node.weaves):
        out = []
        for j, seg in enumerate(shapes):
            p = w.out_position(j)
            out.append(replace(seg, axes=seg.axes[:p] + (w.axis,) + seg.axes[p:]))
        shapes = out
    return shapes


def _same_vector(a: ArrayShape, b: ArrayShape) -> bool:
    return (
        len(a.axes) == len(b.axes) == 1
        and a.axes[0].name == b.axes[0].name
        and a.axes[0].size == b.axes[0].size
    )


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise DiagramError(msg)


def _common_level(shapes: list[ArrayShape], kind: str) -> str:
    levels = {s.level for s in shapes}
    _require(len(levels) == 1, f"{kind}: inputs span levels {sorted(levels)}")
    return levels.pop()


def node_signature(node: OpNode, inputs: list[ArrayShape]) -> list[ArrayShape]:
    """Base output shapes of a node given its base (weave-stripped) inputs."""
    kind = node.kind
    if kind == "identity":
        _require(len(inputs) == 1, "identity takes one segment")
        return [inputs[0]]
    if kind == "transfer":
        _require(len(inputs) == 1, "transfer takes one segment")
        src, dst = node.attr("src"), node.attr("dst")
        _require(inputs[0].level == src, f"transfer src {src!r} != segment level {inputs[0].level!r}")
        quant = node.attr("quant", inputs[0].quant)
        return [replace(inputs[0], level=dst, quant=quant)]
    if kind == "composite":
        inner: Diagram = node.attr("diagram")
        _require(inner is not None, "composite node needs a diagram attr")
        want = list(inner.input_column.segments)
        _require(len(want) == len(inputs), "composite arity mismatch")
        for i, (got, exp) in enumerate(zip(inputs, want)):
            _require(
                got.axis_names() == exp.axis_names(),
                f"composite input {i}: axes {got.axis_names()} != {exp.axis_names()}",
            )
        return list(inner.output_column.segments)
    if kind == "const":
        _require(len(inputs) == 0, "const takes no inputs")
        axes = node.attr("axes", ())
        return [
            ArrayShape(tuple(axes), node.attr("level"), node.attr("quant", DEFAULT_QUANT))
        ]
    if kind == "drop":
        _require(len(inputs) == 1, "drop takes one segment")
        return []
    if kind == "copy":
        _require(len(inputs) == 1, "copy takes one segment")
        n = node.attr("n", 2)
        return [inputs[0]] * n
    if kind == "split":
        _require(len(inputs) == 1, "split takes one segment")
        seg = inputs[0]
        axis_name = node.attr("axis")
        parts = node.attr("parts")
        pos = seg.find_axis(axis_name)
        src_axis = seg.axes[pos]
        if isinstance(src_axis.size, int):
            total = sum(s for _, s in parts)
            _require(
                total == src_axis.size,
                f"split parts of {axis_name!r} sum to {total}, axis has {src_axis.size}",
            )
        out = []
        for pname, psize in parts:
            ax = Axis(pname, psize, src_axis.divisors)
            out.append(replace(seg, axes=seg.axes[:pos] + (ax,) + seg.axes[pos + 1 :]))
        return out
    if kind == "join":
        _require(len(inputs) >= 1, "join takes at least one segment")
        pos = node.attr("position", 0)
        axis_name = node.attr("axis")
        base = inputs[0]
        sizes = []
        for seg in inputs:
            _require(len(seg.axes) == len(base.axes), "join inputs must agree in rank")
            sizes.append(seg.axes[pos].size)
        if all(isinstance(s, int) for s in sizes):
            total: int | str = sum(sizes)
        else:
            total = node.attr("total")
            _require(total is not None, "join of symbolic parts needs a total attr")
        ax = Axis(axis_name, total, base.axes[pos].divisors)
        return [replace(base, axes=base.axes[:pos] + (ax,) + base.axes[pos + 1 :])]

    level = _common_level(inputs, kind)
    quant = node.attr("quant", inputs[0].quant if inputs else DEFAULT_QUANT)

    def scalar() -> ArrayShape:
        return ArrayShape((), level, quant)

    if kind == "contraction":
        _require(len(inputs) == 2, "contraction takes two vectors")
        _require(
            _same_vector(inputs[0], inputs[1]),
            f"contraction inputs must share one axis, got {inputs[0].axis_names()} "
            f"and {inputs[1].axis_names()}",
        )
        return [scalar()]
    if kind == "matmul-add":
        _require(len(inputs) == 3, "matmul-add takes accumulator and two vectors")
        _require(len(inputs[0].axes) == 0, "matmul-add accumulator must be scalar")
        _require(_same_vector(inputs[1], inputs[2]), "matmul-add vectors must share one axis")
        return [scalar()]
    if kind == "softmax":
        _require(len(inputs) == 1 and len(inputs[0].axes) == 1, "softmax takes one vector")
        return [replace(inputs[0], quant=quant)]
    if kind in ("softmax-unscaled", "softmax-auxiliary"):
        _require(
            len(inputs) == 4
            and len(inputs[0].axes) == 1
            and all(len(s.axes) == 0 for s in inputs[1:]),
            f"{kind} takes (scores vector, mu, delta, z)",
        )
        vec = replace(inputs[0], quant=quant)
        return [vec, scalar(), scalar(), scalar()]
    if kind in ("add", "multiply", "max"):
        _require(
            len(inputs) == 2 and all(len(s.axes) == 0 for s in inputs),
            f"{kind} takes two scalars",
        )
        return [scalar()]
    if kind in ("exp", "elementwise"):
        _require(
            len(inputs) == 1 and len(inputs[0].axes) == 0, f"{kind} takes one scalar"
        )
        return [scalar()]
    if kind == "scale":
        _require(len(inputs) == 2, "scale takes (array, scalar factor)")
        _require(len(inputs[1].axes) == 0, "scale factor must be scalar")
        return [replace(inputs[0], quant=quant)]
    raise DiagramError(f"unhandled kind {kind!r}")


def node_io(node: OpNode, column: DataColumn) -> list[ArrayShape]:
    taken = [column.segments[t] for t in node.takes]
    base_in = _strip_weaves(node, taken)
    base_out = node_signature(node, base_in)
    return _apply_weaves(node, base_out)


def column_io(nodes: Sequence[OpNode], column: DataColumn) -> DataColumn:
    seen: list[int] = []
    for node in nodes:
        for t in node.takes:
            _require(
                0 <= t < len(column.segments),
                f"take {t} out of range for column of {len(column.segments)} segments",
            )
            seen.append(t)
    _require(
        sorted(seen) == list(range(len(column.segments))),
        f"op column consumes segments {sorted(seen)}, expected each of "
        f"0..{len(column.segments) - 1} exactly once",
    )
    out: list[ArrayShape] = []
    for node in nodes:
        out.extend(node_io(node, column))
    return DataColumn(tuple(out))


def from_steps(name: str, inputs: DataColumn, ops: Sequence[Sequence[OpNode]]) -> Diagram:
    """Build a diagram from its input column, deriving every data column."""
    cols: list[Any] = [inputs]
    cur = inputs
    for nodes in ops:
        nodes = tuple(nodes)
        cur = column_io(nodes, cur)
        cols.append(nodes)
        cols.append(cur)
    return Diagram(name, tuple(cols))


# ---------------------------------------------------------------------------
# validation


def validate(d: Diagram, hierarchy: Any = None) -> list[str]:
    """Structural diagnostics; an empty list means the diagram is well formed."""
    issues: list[str] = []
    cols = d.columns
    if not cols or not isinstance(cols[0], DataColumn) or not isinstance(cols[-1], DataColumn):
        return ["diagram must start and end with a data column"]
    for i, col in enumerate(cols):
        if isinstance(col, DataColumn) != (i % 2 == 0):
            issues.append(f"column {i}: alternation broken")
    if issues:
        return issues
    for i in range(0, len(cols) - 1, 2):
        data, nodes = cols[i], cols[i + 1]
        try:
            derived = column_io(nodes, data)
        except DiagramError as e:
            issues.append(f"op column {i + 1}: {e}")
            continue
        stored = cols[i + 2]
        if derived != stored:
            for j, (a, b) in enumerate(zip(derived.segments, stored.segments)):
                if a != b:
                    issues.append(
                        f"data column {i + 2}, segment {j}: derived "
                        f"{a.axis_names()}@{a.level} != stored {b.axis_names()}@{b.level}"
                    )
                    break
            else:
                issues.append(
                    f"data column {i + 2}: derived {len(derived)} segments, "
                    f"stored {len(stored)}"
                )
    for ci, col in enumerate(cols):
        if isinstance(col, DataColumn):
            for si, seg in enumerate(col.segments):
                for a in seg.axes:
                    if isinstance(a.size, int) and a.divisors:
                        l = math.lcm(*a.divisors)
                        if a.size % l:
                            issues.append(
                                f"column {ci} segment {si}: axis {a.name!r} size {a.size} "
                                f"not divisible by required {l} (lcm of {sorted(a.divisors)})"
                            )
    if hierarchy is not None:
        pipes = {(p.src, p.dst) for p in hierarchy.pipes}
        pipes |= {(b, a) for a, b in pipes}
        for ci, _, node in d.iter_nodes():
            if node.kind == "transfer":
                edge = (node.attr("src"), node.attr("dst"))
                if edge not in pipes:
                    issues.append(f"op column {ci}: no pipe {edge[0]!r}->{edge[1]!r}")
    return issues


def check(d: Diagram, hierarchy: Any = None) -> Diagram:
    issues = validate(d, hierarchy)
    if issues:
        raise DiagramError(f"invalid diagram {d.name!r}: " + "; ".join(issues))
    return d


# ---------------------------------------------------------------------------
# structural operations


def _identity_column(n: int) -> tuple[OpNode, ...]:
    return tuple(identity(i) for i in range(n))


def _extend_with_passthrough(d: Diagram, extra: tuple[ArrayShape, ...]) -> Diagram:
    """Thread additional untouched segments alongside a diagram."""
    if not extra:
        return d
    cols: list[Any] = []
    for i, col in enumerate(d.columns):
        if isinstance(col, DataColumn):
            cols.append(DataColumn(col.segments + extra))
        else:
            base = len(d.columns[i - 1].segments)
            ids = tuple(identity(base + k) for k in range(len(extra)))
            cols.append(tuple(col) + ids)
    return Diagram(d.name, tuple(cols))


def compose(d1: Diagram, d2: Diagram) -> Diagram:
    """Sequential composition; the shared column is merged.

    If one side has surplus segments they are threaded through the other side
    with identities (the usual convenience of drawing unused wires straight
    across), provided the matching segments form a prefix.
    """
    out, inp = d1.output_column.segments, d2.input_column.segments
    if out != inp:
        if len(inp) > len(out) and inp[: len(out)] == out:
            d1 = _extend_with_passthrough(d1, inp[len(out) :])
        elif len(out) > len(inp) and out[: len(inp)] == inp:
            d2 = _extend_with_passthrough(d2, out[len(inp) :])
        else:
            for i, (a, b) in enumerate(zip(out, inp)):
                if a != b:
                    raise DiagramError(
                        f"compose: segment {i} mismatch: {a.axis_names()}@{a.level}"
                        f"/q{a.quant} vs {b.axis_names()}@{b.level}/q{b.quant}"
                    )
            raise DiagramError(
                f"compose: output of {d1.name!r} has {len(out)} segments, "
                f"input of {d2.name!r} has {len(inp)}"
            )
    return Diagram(f"{d1.name};{d2.name}", d1.columns[:-1] + d2.columns)


def concat(d1: Diagram, d2: Diagram) -> Diagram:
    """Parallel composition: stack columns, shifting wire indices of d2."""
    n1 = len(d1.op_columns())
    n2 = len(d2.op_columns())
    if n1 < n2:
        d1 = _pad(d1, n2 - n1)
    elif n2 < n1:
        d2 = _pad(d2, n1 - n2)
    cols: list[Any] = []
    for i, (c1, c2) in enumerate(zip(d1.columns, d2.columns)):
        if isinstance(c1, DataColumn):
            cols.append(DataColumn(c1.segments + c2.segments))
        else:
            shift = len(d1.columns[i - 1].segments)
            shifted = tuple(replace(n, takes=tuple(t + shift for t in n.takes)) for n in c2)
            cols.append(tuple(c1) + shifted)
    return Diagram(f"{d1.name}|{d2.name}", tuple(cols))


def _pad(d: Diagram, extra_cols: int) -> Diagram:
    cols = list(d.columns)
    n = len(d.output_column.segments)
    for _ in range(extra_cols):
        cols.append(_identity_column(n))
        cols.append(d.output_column)
    return Diagram(d.name, tuple(cols))


def empty_diagram(name: str = "empty") -> Diagram:
    return Diagram(name, (DataColumn(()),))


def _fresh_axis_name(d: Diagram, name: str) -> str:
    used = set(d.axis_sizes())
    if name not in used:
        return name
    k = 2
    while f"{name}_w{k}" in used:
        k += 1
    return f"{name}_w{k}"


def weave(
    d: Diagram,
    axis: Axis,
    targets: Iterable[int],
    positions: Mapping[int, int] | None = None,
    out_position: int = 0,
) -> Diagram:
    """Map the whole diagram over ``axis``.

    ``targets`` are input-column segment indices that carry the new axis;
    non-targeted inputs are broadcast.  The axis propagates to every segment
    that depends on a targeted input, and every node touching marked segments
    gains a weave annotation (outermost position for intermediates).
    """
    targets = sorted(set(targets))
    positions = dict(positions or {})
    name = _fresh_axis_name(d, axis.name)
    axis = replace(axis, name=name)
    n_in = len(d.input_column.segments)
    for t in targets:
        if not 0 <= t < n_in:
            raise DiagramError(f"weave target {t} out of range for {n_in} inputs")

    marked = [i in targets for i in range(n_in)]
    pos_of = {i: positions.get(i, 0) for i in targets}
    new_cols: list[Any] = []

    # A segment is "tailfree" when it flows to the diagram output through
    # generic plumbing only; the strict node that produced it decides the
    # axis position in the final output, so it inserts at ``out_position``.
    n_cols = len(d.columns)
    tailfree: list[list[bool] | None] = [None] * n_cols
    tailfree[n_cols - 1] = [True] * len(d.output_column.segments)
    for ci in range(n_cols - 2, 0, -1):
        col = d.columns[ci]
        if isinstance(col, DataColumn):
            continue
        after = tailfree[ci + 1]
        before = [False] * len(d.columns[ci - 1].segments)
        out_base = 0
        for node in col:
            n_out = len(node_io(node, d.columns[ci - 1]))
            outs_free = n_out > 0 and all(
                after[out_base + j] for j in range(n_out)
            )
            if node.kind in SHAPE_GENERIC_KINDS and outs_free:
                for t in node.takes:
                    before[t] = True
            out_base += n_out
        tailfree[ci - 1] = before

    def mark_segment(seg: ArrayShape, p: int) -> ArrayShape:
        return replace(seg, axes=seg.axes[:p] + (axis,) + seg.axes[p:])

    col_marks = marked
    col_pos = pos_of
    for ci, col in enumerate(d.columns):
        if isinstance(col, DataColumn):
            segs = []
            for si, seg in enumerate(col.segments):
                if col_marks[si]:
                    p = col_pos.get(si, 0)
                    segs.append(mark_segment(seg, p))
                else:
                    segs.append(seg)
            new_cols.append(DataColumn(tuple(segs)))
        else:
            next_marks: list[bool] = []
            next_pos: dict[int, int] = {}
            new_nodes = []
            out_base = 0
            for node in col:
                tmarks = [col_marks[t] for t in node.takes]
                n_out = len(node_io(node, d.columns[ci - 1]))
                if any(tmarks):
                    after = tailfree[ci + 1]
                    outs_free = n_out > 0 and all(
                        after[out_base + j] for j in range(n_out)
                    )
                    opos = out_position if outs_free else 0
                    if node.kind in SHAPE_GENERIC_KINDS:
                        if not all(tmarks):
                            raise DiagramError(
                                f"weave: {node.kind} node mixes marked and unmarked inputs"
                            )
                        new_nodes.append(node)
                        for j in range(n_out):
                            next_marks.append(True)
                            next_pos[out_base + j] = col_pos.get(node.takes[0], 0) if node.kind != "const" else opos
                    else:
                        wtargets = tuple(i for i, m in enumerate(tmarks) if m)
                        wpos = tuple(col_pos.get(node.takes[i], 0) for i in wtargets)
                        w = Weave(axis, wtargets, wpos, tuple(opos for _ in range(n_out)))
                        new_nodes.append(replace(node, weaves=(w,) + node.weaves))
                        for j in range(n_out):
                            next_marks.append(True)
                            next_pos[out_base + j] = opos
                else:
                    new_nodes.append(node)
                    next_marks.extend(False for _ in range(n_out))
                out_base += n_out
            new_cols.append(tuple(new_nodes))
            col_marks = next_marks
            col_pos = next_pos
    return check(Diagram(d.name, tuple(new_cols)))


def add_transfer(
    d: Diagram, segment: int, src: str, dst: str, hierarchy: Any = None, quant: float | None = None
) -> Diagram:
    """Append a transfer column moving one output segment between levels."""
    out = d.output_column.segments
    if not 0 <= segment < len(out):
        raise DiagramError(f"segment {segment} out of range for {len(out)} outputs")
    if out[segment].level != src:
        raise DiagramError(
            f"segment {segment} is at level {out[segment].level!r}, not {src!r}"
        )
    if hierarchy is not None:
        pipes = {(p.src, p.dst) for p in hierarchy.pipes}
        if (src, dst) not in pipes and (dst, src) not in pipes:
            raise DiagramError(f"no pipe between {src!r} and {dst!r} in hierarchy")
    nodes = []
    for i in range(len(out)):
        if i == segment:
            t = transfer(i, src, dst)
            if quant is not None:
                t = t.with_attrs(quant=quant)
            nodes.append(t)
        else:
            nodes.append(identity(i))
    new = column_io(tuple(nodes), d.output_column)
    return Diagram(d.name, d.columns + (tuple(nodes), new))


def _attach_relabel(d: Diagram, rel: Relabel) -> Diagram:
    """Attach a relabel to the first transfer node moving a segment that
    carries the axis; fall back to the first node touching the axis."""
    target: tuple[int, int] | None = None
    fallback: tuple[int, int] | None = None
    for ci, ni, node in d.iter_nodes():
        col: DataColumn = d.columns[ci - 1]
        touches = any(
            rel.axis in col.segments[t].axis_names() for t in node.takes
        )
        if touches and node.kind == "transfer" and target is None:
            target = (ci, ni)
            break
        if touches and fallback is None:
            fallback = (ci, ni)
    spot = target or fallback
    if spot is None:
        raise DiagramError(f"axis {rel.axis!r} not found in diagram {d.name!r}")
    ci, ni = spot
    cols = list(d.columns)
    nodes = list(cols[ci])
    nodes[ni] = replace(nodes[ni], relabels=nodes[ni].relabels + (rel,))
    cols[ci] = tuple(nodes)
    return Diagram(d.name, tuple(cols))


def relabel_group(d: Diagram, axis: str, g: int | str) -> Diagram:
    """Tile an axis: groups of size ``g`` run as independent repeats."""
    sizes = d.axis_sizes()
    if axis not in sizes:
        raise DiagramError(f"axis {axis!r} not present in {d.name!r}")
    size = sizes[axis]
    if isinstance(g, int) and g < 1:
        raise DiagramError(f"group size must be >= 1, got {g}")
    if isinstance(g, int) and isinstance(size, int) and g > size:
        raise DiagramError(f"group size {g} exceeds axis size {size}")
    if axis in d.relabel_map():
        raise DiagramError(f"axis {axis!r} already relabeled")
    for ci, _, node in d.iter_nodes():
        if node.kind in SHAPE_GENERIC_KINDS or node.kind == "composite":
            continue
        col: DataColumn = d.columns[ci - 1]
        base = _strip_weaves(node, [col.segments[t] for t in node.takes])
        for seg in base:
            if axis in seg.axis_names():
                raise DiagramError(
                    f"axis {axis!r} is operated on by a {node.kind} node "
                    f"(op column {ci}); only weaved axes can be grouped"
                )
    return _attach_relabel(d, Relabel(axis, "group", g))


def relabel_stream(d: Diagram, axis: str, s: int | str, certificate: Any) -> Diagram:
    """Stream an axis in chunks of ``s``; requires a streamability certificate."""
    if certificate is None or getattr(certificate, "axis", None) != axis:
        raise DiagramError(f"stream relabel of {axis!r} needs a certificate for that axis")
    src = getattr(certificate, "source", None)
    if src is not None and strip_relabels(src) != strip_relabels(d):
        raise DiagramError("certificate was issued for a structurally different diagram")
    has_transfer = any(
        node.kind == "transfer"
        and axis in d.columns[ci - 1].segments[node.takes[0]].axis_names()
        for ci, _, node in d.iter_nodes()
    )
    if not has_transfer:
        raise DiagramError(f"axis {axis!r} does not originate at a transfer")
    if axis in d.relabel_map():
        raise DiagramError(f"axis {axis!r} already relabeled")
    maintained = tuple(getattr(certificate, "maintained", ()))
    return _attach_relabel(d, Relabel(axis, "stream", s, maintained))


def strip_relabels(d: Diagram) -> Diagram:
    cols: list[Any] = []
    for col in d.columns:
        if isinstance(col, DataColumn):
            cols.append(col)
        else:
            cols.append(tuple(replace(n, relabels=()) for n in col))
    return Diagram(d.name, tuple(cols))


# ---------------------------------------------------------------------------
# explicit group expansion


def partition_sizes(size: int, chunk: int) -> list[int]:
    """Ceil partition: full chunks plus a smaller trailing remainder."""
    if chunk < 1:
        raise DiagramError(f"chunk must be >= 1, got {chunk}")
    n = math.ceil(size / chunk)
    out = [chunk] * n
    if size % chunk:
        out[-1] = size % chunk
    return out


def expand_groups(d: Diagram, axis: str, g: int) -> Diagram:
    """Rewrite grouping explicitly: split the axis, run one copy of the body
    per group (broadcast inputs copied per group), join the outputs.

    The result is oracle-equivalent to ``d``; partitioning is value-exact.
    """
    sizes = d.axis_sizes()
    if axis not in sizes or not isinstance(sizes[axis], int):
        raise DiagramError(f"expand_groups needs a concrete size for {axis!r}")
    # Partitioning is only sound for a weaved axis: if the axis reaches a
    # compute node's base shape, the node operates along it and a split
    # would change its result.
    for ci, opcol in enumerate(d.op_columns()):
        before = d.data_columns()[ci]
        for node in opcol:
            if node.kind in ("identity", "transfer"):
                continue
            base = _strip_weaves(node, [before.segments[t] for t in node.takes])
            for seg in base:
                if axis in seg.axis_names():
                    raise DiagramError(
                        f"axis {axis!r} is operated on by {node.kind!r}; "
                        f"only weaved axes can be group-partitioned"
                    )
    size: int = sizes[axis]
    parts = partition_sizes(size, g)
    n = len(parts)
    part_axes = [Axis(f"{axis}__g{i}", p) for i, p in enumerate(parts)]

    inputs = d.input_column
    split_nodes = []
    carries = [axis in seg.axis_names() for seg in inputs.segments]
    for i, seg in enumerate(inputs.segments):
        if carries[i]:
            split_nodes.append(
                prim(
                    "split",
                    (i,),
                    axis=axis,
                    parts=tuple((a.name, a.size) for a in part_axes),
                )
            )
        else:
            split_nodes.append(prim("copy", (i,), n=n))
    ops: list[tuple[OpNode, ...]] = [tuple(split_nodes)]

    # After the split column the segments are ordered input-major; reorder to
    # part-major once with identities so each part's body wires contiguously.
    m = len(inputs.segments)
    order = [j * n + i for i in range(n) for j in range(m)]  # part-major gather
    ops.append(tuple(identity(t) for t in order))

    def instantiate(node: OpNode, part: Axis) -> OpNode:
        new_weaves = tuple(
            replace(w, axis=part) if w.axis.name == axis else w for w in node.weaves
        )
        return replace(node, weaves=new_weaves, relabels=())

    for opcol_idx, opcol in enumerate(d.op_columns()):
        before = d.data_columns()[opcol_idx]
        width = len(before.segments)
        nodes: list[OpNode] = []
        for i in range(n):
            shift = i * width
            for node in opcol:
                shifted = replace(node, takes=tuple(t + shift for t in node.takes))
                nodes.append(instantiate(shifted, part_axes[i]))
        ops.append(tuple(nodes))

    out_width = len(d.output_column.segments)
    join_nodes = []
    for j, seg in enumerate(d.output_column.segments):
        takes = tuple(i * out_width + j for i in range(n))
        if axis in seg.axis_names():
            pos = seg.find_axis(axis)
            join_nodes.append(prim("join", takes, axis=axis, position=pos))
        else:
            raise DiagramError(
                f"output segment {j} does not carry grouped axis {axis!r}"
            )
    ops.append(tuple(join_nodes))
    return from_steps(f"{d.name}[g:{axis}={g}]", inputs, ops)


# ---------------------------------------------------------------------------
# JSON interchange


def _axis_to_json(a: Axis) -> dict:
    out: dict[str, Any] = {"name": a.name, "size": a.size}
    if a.divisors:
        out["divisors"] = sorted(a.divisors)
    return out


def _axis_from_json(j: dict) -> Axis:
    return Axis(j["name"], j["size"], frozenset(j.get("divisors", ())))


def _segment_to_json(s: ArrayShape) -> dict:
    return {
        "axes": [_axis_to_json(a) for a in s.axes],
        "level": s.level,
        "quant": s.quant,
    }


def _segment_from_json(j: dict) -> ArrayShape:
    return ArrayShape(
        tuple(_axis_from_json(a) for a in j["axes"]), j["level"], j.get("quant", DEFAULT_QUANT)
    )


def _attr_value_to_json(v: Any) -> Any:
    if isinstance(v, Diagram):
        return {"__diagram__": diagram_to_json(v)}
    if isinstance(v, Axis):
        return {"__axis__": _axis_to_json(v)}
    if isinstance(v, tuple):
        return {"__tuple__": [_attr_value_to_json(x) for x in v]}
    return v

def _attr_value_from_json(v: Any) -> Any:
    if isinstance(v, dict) and "__diagram__" in v:
        return diagram_from_json(v["__diagram__"])
    if isinstance(v, dict) and "__axis__" in v:
        return _axis_from_json(v["__axis__"])
    if isinstance(v, dict) and "__tuple__" in v:
        return tuple(_attr_value_from_json(x) for x in v["__tuple__"])
    if isinstance(v, list):
        return tuple(_attr_value_from_json(x) for x in v)
    return v


def _node_to_json(n: OpNode) -> dict:
    out: dict[str, Any] = {"kind": n.kind, "takes": list(n.takes)}
    if n.weaves:
        out["weaves"] = [
            {
                "axis": _axis_to_json(w.axis),
                "targets": list(w.targets),
                "positions": list(w.positions),
                "out_positions": list(w.out_positions),
            }
            for w in n.weaves
        ]
    if n.relabels:
        out["relabels"] = [
            {
                "axis": r.axis,
                "kind": r.kind,
                "size": r.size,
                **(
                    {"maintained": [_segment_to_json(s) for s in r.maintained]}
                    if r.maintained
                    else {}
                ),
            }
            for r in n.relabels
        ]
    if n.attrs:
        out["attrs"] = {k: _attr_value_to_json(v) for k, v in n.attrs}
    return out


def _node_from_json(j: dict) -> OpNode:
    weaves = tuple(
        Weave(
            _axis_from_json(w["axis"]),
            tuple(w["targets"]),
            tuple(w.get("positions", ())),
            tuple(w.get("out_positions", ())),
        )
        for w in j.get("weaves", ())
    )
    relabels = tuple(
        Relabel(
            r["axis"],
            r["kind"],
            r["size"],
            tuple(_segment_from_json(s) for s in r.get("maintained", ())),
        )
        for r in j.get("relabels", ())
    )
    attrs = freeze_attrs(
        {k: _attr_value_from_json(v) for k, v in j.get("attrs", {}).items()}
    )
    return OpNode(j["kind"], tuple(j["takes"]), weaves, relabels, attrs)


def diagram_to_json(d: Diagram) -> dict:
    cols: list[dict] = []
    for col in d.columns:
        if isinstance(col, DataColumn):
            cols.append({"data": [_segment_to_json(s) for s in col.segments]})
        elif len(col) == 1:
            cols.append({"op": _node_to_json(col[0])})
        else:
            cols.append({"op": {"kind": "stack", "nodes": [_node_to_json(n) for n in col]}})
    return {
        "version": JSON_VERSION,
        "name": d.name,
        "params": list(d.params()),
        "columns": cols,
    }


def diagram_from_json(j: dict) -> Diagram:
    version = j.get("version")
    if version != JSON_VERSION:
        raise DiagramError(f"unsupported diagram version {version!r}")
    cols: list[Any] = []
    for col in j["columns"]:
        if "data" in col:
            cols.append(DataColumn(tuple(_segment_from_json(s) for s in col["data"])))
        else:
            op = col["op"]
            if op.get("kind") == "stack":
                cols.append(tuple(_node_from_json(n) for n in op["nodes"]))
            else:
                cols.append((_node_from_json(op),))
    return Diagram(j["name"], tuple(cols))


def dumps(d: Diagram) -> str:
    return json.dumps(diagram_to_json(d), indent=2, sort_keys=True)


def loads(text: str) -> Diagram:
    return diagram_from_json(json.loads(text))
