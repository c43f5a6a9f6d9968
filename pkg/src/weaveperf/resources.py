"""Resource analysis: transfer volume, arithmetic counts, memory footprint.

All results are symbolic expressions in the diagram's size parameters (and in
symbolic group/stream batch sizes), concretized on demand with ``evaluate``.

Conventions shared with the numeric interpreter's live tally (the two are
kept as independent code paths so one checks the other):

==================  =======================  ==================
kind                flops                    special
==================  =======================  ==================
contraction(k)      2k
matmul-add(k)       2k
add, multiply       1
scale(n)            n                        +1 if reciprocal
max                                          1
exp                                          1
elementwise         1 (op != exp)            1 (op == exp)
softmax(x)          3x                       x + 1
softmax-unscaled    3x + 2                   x + 2
softmax-auxiliary   3x + 4                   x + 2
==================  =======================  ==================

Generic plumbing (identity, transfer, copy, split, join, drop, const) costs
nothing arithmetically; transfers are tallied separately, in elements, per
(src, dst) level pair.

Grouping a diagram on axis ``a`` with batch size g splits the work into
N_g = a/g repeats.  Transfers of segments that carry ``a`` total the full
axis worth of elements across repeats; segments that do not carry ``a`` are
broadcast, i.e. re-sent once per repeat, multiplying their volume by N_g.
Streamed axes never multiply transfers: the chunks of one pass add back up
to the full axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

import sympy

from . import diagram as dg
from ._symbols import (
    Assumption,
    evaluate as eval_expr,
    expr_to_json,
    free_params,
    parse_assumptions,
    symbolic_max,
    to_expr,
)

Expr = sympy.Expr

CEIL_MODES = ("exact", "idealized")


def _check_mode(mode: str) -> None:
    if mode not in CEIL_MODES:
        raise ValueError(f"mode must be one of {CEIL_MODES}, got {mode!r}")


def _repeat_count(size: Expr, batch: Expr, mode: str) -> Expr:
    """Number of batches of ``batch`` covering ``size``."""
    ratio = to_expr(size) / to_expr(batch)
    if mode == "exact" and ratio.free_symbols == set():
        return sympy.Integer(sympy.ceiling(ratio))
    return ratio


def _weave_factor(node: dg.OpNode) -> Expr:
    f: Expr = sympy.Integer(1)
    for w in node.weaves:
        f = f * to_expr(w.axis.size)
    return f


def _base_inputs(d: dg.Diagram, ci: int, node: dg.OpNode) -> list[dg.ArrayShape]:
    col = d.columns[ci - 1]
    taken = [col.segments[t] for t in node.takes]
    return dg._strip_weaves(node, taken)


def _vector_len(seg: dg.ArrayShape) -> Expr:
    return to_expr(seg.axes[0].size)


@dataclass
class ArithCost:
    flops: Expr = sympy.Integer(0)
    special: Expr = sympy.Integer(0)

    def __add__(self, other: "ArithCost") -> "ArithCost":
        return ArithCost(self.flops + other.flops, self.special + other.special)

    def scaled(self, k: Expr) -> "ArithCost":
        return ArithCost(sympy.expand(k * self.flops), sympy.expand(k * self.special))


def _node_arith(d: dg.Diagram, ci: int, node: dg.OpNode) -> ArithCost:
    kind = node.kind
    if kind in dg.SHAPE_GENERIC_KINDS:
        return ArithCost()
    base = _base_inputs(d, ci, node)
    one = sympy.Integer(1)
    if kind == "composite":
        inner = node.attr("diagram")
        cost = arithmetic_cost(inner)
    elif kind in ("contraction", "matmul-add"):
        k = _vector_len(base[-1])
        cost = ArithCost(flops=2 * k)
    elif kind in ("add", "multiply"):
        cost = ArithCost(flops=one)
    elif kind == "max":
        cost = ArithCost(special=one)
    elif kind == "exp":
        cost = ArithCost(special=one)
    elif kind == "elementwise":
        if node.attr("op", "identity") == "exp":
            cost = ArithCost(special=one)
        else:
            cost = ArithCost(flops=one)
    elif kind == "scale":
        n = base[0].count()
        cost = ArithCost(flops=n, special=one if node.attr("reciprocal", False) else 0)
    elif kind == "softmax":
        x = _vector_len(base[0])
        cost = ArithCost(flops=3 * x, special=x + 1)
    elif kind == "softmax-unscaled":
        x = _vector_len(base[0])
        cost = ArithCost(flops=3 * x + 2, special=x + 2)
    elif kind == "softmax-auxiliary":
        x = _vector_len(base[0])
        cost = ArithCost(flops=3 * x + 4, special=x + 2)
    else:
        raise dg.DiagramError(f"no arithmetic cost rule for kind {kind!r}")
    return cost.scaled(_weave_factor(node))


def arithmetic_cost(d: dg.Diagram) -> ArithCost:
    total = ArithCost()
    for ci, _, node in d.iter_nodes():
        total = total + _node_arith(d, ci, node)
    return ArithCost(sympy.expand(total.flops), sympy.expand(total.special))


def group_sizes(d: dg.Diagram) -> dict[str, Expr]:
    return {
        a: to_expr(r.size) for a, r in d.relabel_map().items() if r.kind == "group"
    }


def stream_sizes(d: dg.Diagram) -> dict[str, Expr]:
    return {
        a: to_expr(r.size) for a, r in d.relabel_map().items() if r.kind == "stream"
    }


def repeat_counts(d: dg.Diagram, mode: str = "exact") -> dict[str, Expr]:
    """N_g per grouped axis."""
    _check_mode(mode)
    sizes = d.axis_sizes()
    return {
        a: _repeat_count(sizes[a], g, mode) for a, g in group_sizes(d).items()
    }


def transfer_cost(d: dg.Diagram, mode: str = "exact") -> dict[tuple[str, str], Expr]:
    """Elements moved per (src, dst) level pair, summed over transfer nodes."""
    _check_mode(mode)
    counts = repeat_counts(d, mode)
    out: dict[tuple[str, str], Expr] = {}
    for ci, _, node in d.iter_nodes():
        if node.kind != "transfer":
            continue
        seg = d.columns[ci - 1].segments[node.takes[0]]
        names = set(seg.axis_names())
        vol = seg.count()
        for axis, n_g in counts.items():
            if axis not in names:
                vol = vol * n_g
        key = (node.attr("src"), node.attr("dst"))
        out[key] = sympy.expand(out.get(key, sympy.Integer(0)) + vol)
    return out


def total_transfer(d: dg.Diagram, mode: str = "exact") -> Expr:
    return sympy.expand(sum(transfer_cost(d, mode).values(), sympy.Integer(0)))


def _segment_footprint(seg: dg.ArrayShape, batch: Mapping[str, Expr]) -> Expr:
    n: Expr = sympy.Integer(1)
    for ax in seg.axes:
        n = n * batch.get(ax.name, to_expr(ax.size))
    return n


def memory_columns(d: dg.Diagram, level: str = "l1") -> list[Expr]:
    """Per-data-column live elements at ``level``, with relabels applied.

    Grouped axes occupy their batch size g, streamed axes their chunk size s.
    While a streamed axis is live at the level, the maintained carry of the
    stream (recorded at relabel time) is resident too and is added to those
    columns.
    """
    batch: dict[str, Expr] = {}
    relabels = d.relabel_map()
    for a, r in relabels.items():
        batch[a] = to_expr(r.size)
    streamed = {a for a, r in relabels.items() if r.kind == "stream"}
    maintained: list[dg.ArrayShape] = []
    for a, r in relabels.items():
        if r.kind == "stream":
            maintained.extend(r.maintained)
    carry = sum(
        (_segment_footprint(m, batch) for m in maintained), sympy.Integer(0)
    )
    per_column: list[Expr] = []
    for col in d.data_columns():
        here = [s for s in col.segments if s.level == level]
        if not here:
            continue
        total = sum((_segment_footprint(s, batch) for s in here), sympy.Integer(0))
        if streamed and any(
            set(s.axis_names()) & streamed for s in here
        ):
            total = total + carry
        per_column.append(sympy.expand(total))
    return per_column


def memory_lower_bound(
    d: dg.Diagram,
    level: str = "l1",
    assumptions: Iterable[Assumption] | Iterable[str] = (),
) -> tuple[Expr, bool]:
    """Peak of ``memory_columns``.

    Returns (expression, resolved); ``resolved`` is False when the column
    maxima could not be ordered under the given assumptions and a symbolic
    Max remains.
    """
    per_column = memory_columns(d, level)
    if not per_column:
        return sympy.Integer(0), True
    return symbolic_max(per_column, parse_assumptions(assumptions))


@dataclass
class CostReport:
    name: str
    transfers: dict[tuple[str, str], Expr]
    flops: Expr
    special: Expr
    m_lower: Expr
    m_resolved: bool
    repeats: dict[str, Expr] = field(default_factory=dict)

    @property
    def total_transfer(self) -> Expr:
        return sympy.expand(sum(self.transfers.values(), sympy.Integer(0)))

    def params(self) -> tuple[str, ...]:
        exprs = [self.flops, self.special, self.m_lower, *self.transfers.values()]
        names: set[str] = set()
        for e in exprs:
            names |= free_params(e)
        return tuple(sorted(names))

    def evaluate(self, bindings: Mapping[str, int]) -> "CostReport":
        def ev(e: Expr) -> Expr:
            return to_expr(eval_expr(e, bindings))

        return CostReport(
            self.name,
            {k: ev(v) for k, v in self.transfers.items()},
            ev(self.flops),
            ev(self.special),
            ev(self.m_lower),
            self.m_resolved,
            {k: ev(v) for k, v in self.repeats.items()},
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "transfers": [
                {"src": s, "dst": t, "elements": expr_to_json(v)}
                for (s, t), v in sorted(self.transfers.items())
            ],
            "total_transfer": expr_to_json(self.total_transfer),
            "flops": expr_to_json(self.flops),
            "special": expr_to_json(self.special),
            "memory_lower_bound": expr_to_json(self.m_lower),
            "memory_resolved": self.m_resolved,
            "repeats": {k: expr_to_json(v) for k, v in sorted(self.repeats.items())},
            "params": list(self.params()),
        }

    def to_text(self) -> str:
        lines = [f"resource report: {self.name}"]
        for (s, t), v in sorted(self.transfers.items()):
            lines.append(f"  transfer {s} -> {t}: {v}")
        lines.append(f"  total transfer: {self.total_transfer}")
        lines.append(f"  flops: {self.flops}")
        lines.append(f"  special: {self.special}")
        mark = "" if self.m_resolved else " (unresolved max)"
        lines.append(f"  memory lower bound: {self.m_lower}{mark}")
        for k, v in sorted(self.repeats.items()):
            lines.append(f"  repeats over {k}: {v}")
        return "\n".join(lines)


def cost_report(
    d: dg.Diagram,
    mode: str = "exact",
    level: str = "l1",
    assumptions: Iterable[Assumption] | Iterable[str] = (),
) -> CostReport:
    arith = arithmetic_cost(d)
    m, resolved = memory_lower_bound(d, level, assumptions)
    return CostReport(
        name=d.name,
        transfers=transfer_cost(d, mode),
        flops=arith.flops,
        special=arith.special,
        m_lower=m,
        m_resolved=resolved,
        repeats=repeat_counts(d, mode),
    )
