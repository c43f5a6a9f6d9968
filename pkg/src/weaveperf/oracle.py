"""Reference interpreter for diagrams.

Evaluates a diagram on concrete numpy inputs by walking the columns and
applying each node: weaves iterate over their axis (broadcasting untargeted
inputs), primitives apply their dense textbook definition.  Performance of
the interpreter is a non-goal; trustworthiness is the point, so the code
favors straight loops over clever vectorization.

The interpreter also tallies instructions as it executes: multiply/add
arithmetic in ``flops``, exponentials / maxima / divisions in ``special``,
and element counts of level transfers in ``transfers``.  These tallies are an
independent cross-check of the symbolic resource analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import diagram as dg
from ._symbols import as_int

NEG_INF = float("-inf")


class EvalError(ValueError):
    pass


@dataclass
class Counters:
    flops: int = 0
    special: int = 0
    transfers: dict[tuple[str, str], int] = field(default_factory=dict)

    def add_transfer(self, src: str, dst: str, n: int) -> None:
        key = (src, dst)
        self.transfers[key] = self.transfers.get(key, 0) + n

    def total_transferred(self) -> int:
        return sum(self.transfers.values())


@dataclass(frozen=True)
class ConcreteTensor:
    """A concrete value: shape plus flat row-major data."""

    shape: tuple[int, ...]
    data: tuple[float, ...]

    @staticmethod
    def from_array(arr: np.ndarray) -> "ConcreteTensor":
        a = np.asarray(arr)
        return ConcreteTensor(tuple(a.shape), tuple(a.reshape(-1).tolist()))

    def to_array(self) -> np.ndarray:
        return np.asarray(self.data, dtype=float).reshape(self.shape)


def _resolve_beta(node: dg.OpNode, bindings: Mapping[str, int]) -> float:
    beta = node.attr("beta")
    if beta is not None:
        return float(beta)
    rs = node.attr("beta_rsqrt")
    if rs is not None:
        return 1.0 / math.sqrt(as_int(rs, bindings))
    return 1.0


def _softmax_update(
    x: np.ndarray, mu_p: float, z_p: float, beta: float
) -> tuple[np.ndarray, float, float, float]:
    """Shared core of the softmax primitives.

    Returns (unnormalized weights, mu, delta, z).  The running maximum is
    seeded with -inf; exp(-inf - -inf) is defined as 0 so that applying the
    update to an empty chunk starting from the initial state returns the
    initial state unchanged.  Callers tally their own instruction costs.
    """
    n = x.shape[0]
    bx = beta * x
    mu = float(max(mu_p, bx.max())) if n else float(mu_p)
    s = np.exp(bx - mu) if n else np.zeros(0)
    if mu_p == NEG_INF and mu == NEG_INF:
        delta = 0.0
    else:
        delta = math.exp(mu_p - mu)
    z = delta * z_p + float(s.sum())
    return s, mu, delta, z


def _eval_base(
    node: dg.OpNode,
    vals: list[np.ndarray],
    bindings: Mapping[str, int],
    ctr: Counters,
) -> list[np.ndarray]:
    kind = node.kind
    if kind == "identity":
        return [vals[0]]
    if kind == "transfer":
        ctr.add_transfer(node.attr("src"), node.attr("dst"), int(np.size(vals[0])))
        return [vals[0]]
    if kind == "copy":
        return [vals[0]] * node.attr("n", 2)
    if kind == "drop":
        return []
    if kind == "const":
        shape = tuple(as_int(a.size, bindings) for a in node.attr("axes", ()))
        return [np.full(shape, float(node.attr("value", 0.0)))]
    if kind == "composite":
        inner: dg.Diagram = node.attr("diagram")
        return evaluate_raw(inner, vals, bindings, ctr)
    if kind == "contraction":
        v, w = vals
        ctr.flops += 2 * v.shape[0]
        return [np.asarray(np.dot(v, w))]
    if kind == "matmul-add":
        acc, v, w = vals
        ctr.flops += 2 * v.shape[0]
        return [np.asarray(acc + np.dot(v, w))]
    if kind == "add":
        ctr.flops += 1
        return [np.asarray(vals[0] + vals[1])]
    if kind == "multiply":
        ctr.flops += 1
        return [np.asarray(vals[0] * vals[1])]
    if kind == "max":
        ctr.special += 1
        return [np.asarray(np.maximum(vals[0], vals[1]))]
    if kind == "exp":
        ctr.special += 1
        return [np.asarray(np.exp(vals[0]))]
    if kind == "elementwise":
        op = node.attr("op", "identity")
        x = vals[0]
        if op == "exp":
            ctr.special += 1
            return [np.asarray(np.exp(x))]
        if op == "neg":
            ctr.flops += 1
            return [np.asarray(-x)]
        if op == "relu":
            ctr.flops += 1
            return [np.asarray(np.maximum(x, 0.0))]
        if op == "square":
            ctr.flops += 1
            return [np.asarray(x * x)]
        raise EvalError(f"unknown elementwise op {op!r}")
    if kind == "scale":
        x, f = vals
        n = int(np.size(x))
        ctr.flops += n
        if node.attr("reciprocal", False):
            ctr.special += 1
            return [np.asarray(x / f)]
        return [np.asarray(x * f)]
    if kind == "softmax":
        beta = _resolve_beta(node, bindings)
        x = vals[0]
        n = x.shape[0]
        s, mu, delta, z = _softmax_update(x, NEG_INF, 0.0, beta)
        ctr.flops += 3 * n
        ctr.special += n + 1
        return [s / z if z else s]
    if kind in ("softmax-unscaled", "softmax-auxiliary"):
        beta = _resolve_beta(node, bindings)
        x, mu_p, delta_p, z_p = vals
        n = x.shape[0]
        s, mu, delta, z = _softmax_update(x, float(mu_p), float(z_p), beta)
        if kind == "softmax-auxiliary":
            ctr.flops += 3 * n + 4
            ctr.special += n + 2
            y = s / z if z else s
        else:
            ctr.flops += 3 * n + 2
            ctr.special += n + 2
            y = s
        return [y, np.asarray(mu), np.asarray(delta), np.asarray(z)]
    raise EvalError(f"cannot evaluate kind {kind!r}")


def _eval_split(node: dg.OpNode, val: np.ndarray, pos: int) -> list[np.ndarray]:
    parts = node.attr("parts")
    out = []
    start = 0
    for _, size in parts:
        idx = [slice(None)] * val.ndim
        idx[pos] = slice(start, start + size)
        out.append(val[tuple(idx)])
        start += size
    return out


def _eval_node(
    node: dg.OpNode,
    vals: list[np.ndarray],
    shapes: list[dg.ArrayShape],
    bindings: Mapping[str, int],
    ctr: Counters,
    weave_idx: int = 0,
) -> list[np.ndarray]:
    if weave_idx < len(node.weaves):
        w = node.weaves[weave_idx]
        size = as_int(w.axis.size, bindings)
        pos_by_target = dict(zip(w.targets, w.positions))
        slices: list[list[np.ndarray]] = []
        for i in range(size):
            sub = []
            for t, v in enumerate(vals):
                if t in pos_by_target:
                    sub.append(np.take(v, i, axis=pos_by_target[t]))
                else:
                    sub.append(v)
            slices.append(
                _eval_node(node, sub, shapes, bindings, ctr, weave_idx + 1)
            )
        n_out = len(slices[0])
        outs = []
        for j in range(n_out):
            outs.append(np.stack([s[j] for s in slices], axis=node.weaves[weave_idx].out_position(j)))
        return outs

    # base application; split/join need the axis position from shape context
    if node.kind == "split":
        seg = shapes[0]
        pos = seg.find_axis(node.attr("axis"))
        return _eval_split(node, vals[0], pos)
    if node.kind == "join":
        pos = node.attr("position", 0)
        return [np.concatenate(vals, axis=pos)]
    return _eval_base(node, vals, bindings, ctr)


def evaluate_raw(
    d: dg.Diagram,
    inputs: Sequence[np.ndarray],
    bindings: Mapping[str, int] | None = None,
    ctr: Counters | None = None,
) -> list[np.ndarray]:
    bindings = dict(bindings or {})
    ctr = ctr if ctr is not None else Counters()
    in_col = d.input_column
    if len(inputs) != len(in_col.segments):
        raise EvalError(
            f"{d.name}: expected {len(in_col.segments)} inputs, got {len(inputs)}"
        )
    values: list[np.ndarray] = []
    for i, (arr, seg) in enumerate(zip(inputs, in_col.segments)):
        arr = np.asarray(arr, dtype=float)
        want = tuple(as_int(a.size, bindings) for a in seg.axes)
        if arr.shape != want:
            raise EvalError(
                f"{d.name}: input {i} has shape {arr.shape}, expected {want}"
            )
        values.append(arr)
    for idx, col in enumerate(d.columns):
        if idx == 0 or isinstance(col, dg.DataColumn):
            continue
        shapes_col = d.columns[idx - 1]
        new_vals: list[np.ndarray] = []
        for node in col:
            vals = [values[t] for t in node.takes]
            shapes = [shapes_col.segments[t] for t in node.takes]
            outs = _eval_node(node, vals, shapes, bindings, ctr)
            for o in outs:
                if np.isnan(o).any() or np.isposinf(o).any():
                    raise EvalError(
                        f"{d.name}: non-finite value out of {node.kind} node "
                        f"at op column {idx}"
                    )
            new_vals.extend(outs)
        values = new_vals
    return values


def evaluate(
    d: dg.Diagram,
    inputs: Sequence[ConcreteTensor | np.ndarray],
    bindings: Mapping[str, int] | None = None,
) -> list[ConcreteTensor]:
    arrs = [x.to_array() if isinstance(x, ConcreteTensor) else x for x in inputs]
    outs = evaluate_raw(d, arrs, bindings)
    return [ConcreteTensor.from_array(o) for o in outs]


def instruction_count(
    d: dg.Diagram,
    bindings: Mapping[str, int] | None = None,
    seed: int = 0,
) -> Counters:
    """Execute on random inputs and report instruction tallies."""
    rng = np.random.default_rng(seed)
    bindings = dict(bindings or {})
    inputs = [
        rng.uniform(-1.0, 1.0, tuple(as_int(a.size, bindings) for a in seg.axes))
        for seg in d.input_column.segments
    ]
    ctr = Counters()
    evaluate_raw(d, inputs, bindings, ctr)
    return ctr


@dataclass(frozen=True)
class EquivalenceReport:
    trials: int
    max_rel_err: float
    passed: bool


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise EvalError(f"output shapes differ: {a.shape} vs {b.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))


def equivalence_check(
    d1: dg.Diagram,
    d2: dg.Diagram,
    trials: int = 20,
    seed: int = 0,
    tol: float = 1e-9,
    bindings: Mapping[str, int] | None = None,
    low: float = -1.0,
    high: float = 1.0,
) -> EquivalenceReport:
    """Compare two diagrams on seeded random inputs.

    Trials are independently seeded so the order of execution is irrelevant;
    ``tol == 0`` demands bitwise equality.
    """
    bindings = dict(bindings or {})
    segs1 = d1.input_column.segments
    segs2 = d2.input_column.segments
    if len(segs1) != len(segs2):
        raise EvalError("diagrams take different numbers of inputs")
    worst = 0.0
    for t in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, t]))
        inputs = [
            rng.uniform(low, high, tuple(as_int(a.size, bindings) for a in seg.axes))
            for seg in segs1
        ]
        out1 = evaluate_raw(d1, [x.copy() for x in inputs], bindings)
        out2 = evaluate_raw(d2, [x.copy() for x in inputs], bindings)
        if len(out1) != len(out2):
            raise EvalError(
                f"outputs differ in arity: {len(out1)} vs {len(out2)}"
            )
        for a, b in zip(out1, out2):
            worst = max(worst, _rel_err(np.asarray(a), np.asarray(b)))
    return EquivalenceReport(trials, worst, worst <= tol)
