"""Streamability: certify that an axis can be consumed in chunks.

A computation can stream over an axis when, after an optional chunk-local
prefix (ops weaved over the axis), the remaining ops that consume the axis
match a registered kernel with a known accumulator: a step function B such
that running B over the chunks of the input, from a fixed initial state,
reproduces the full computation.  Certification is syntactic: the consuming
suffix must literally match a registered kernel's op spine, so a diagram
with an exotic but fixable reduction is conservatively rejected.

``expand`` materializes a certified stream as an explicit diagram: split the
carrying inputs, initialize the state, apply the per-chunk body once per
chunk strictly left to right, then run the kernel's tail.  The expansion is
oracle-equivalent to the original diagram; floating-point agreement is up to
re-association of the reduction only.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from . import diagram as dg
from . import oracle

NEG_INF = float("-inf")

LAW_SIZES = ((1, 1), (2, 3), (4, 4))
LAW_TOL = 1e-9


class StreamabilityError(dg.DiagramError):
    pass


class KernelLawError(StreamabilityError):
    pass


# ---------------------------------------------------------------------------
# kernel registry


@dataclass(frozen=True)
class KernelSpec:
    """A streamable reduction pattern.

    ``spine`` is the op-kind sequence that consumes the streamed axis in the
    source diagram.  ``build_function`` produces the one-shot computation at
    a given chunk length; ``build_accumulator`` the step B taking the carried
    state plus one chunk and returning the updated state.  ``law_mask`` lists
    the state components that are semantically carried (a component such as
    the softmax rescale factor delta is a per-step byproduct and is excluded
    from the accumulator law).
    """

    name: str
    spine: tuple[str, ...]
    state_arity: int
    init_values: tuple[float, ...]
    law_mask: tuple[int, ...]
    aux_indices: tuple[int, ...]
    build_function: Callable[[int], dg.Diagram]
    build_accumulator: Callable[[int], dg.Diagram]


def _contraction_function(n: int) -> dg.Diagram:
    ax = dg.Axis("k", n)
    v = dg.ArrayShape((ax,), "l1", 4)
    w = dg.ArrayShape((ax,), "l1", 4)
    return dg.from_steps(
        "contraction-full",
        dg.DataColumn((v, w)),
        [(dg.prim("contraction", (0, 1)),)],
    )


def _contraction_accumulator(m: int) -> dg.Diagram:
    ax = dg.Axis("k", m)
    y = dg.ArrayShape((), "l1", 4)
    v = dg.ArrayShape((ax,), "l1", 4)
    w = dg.ArrayShape((ax,), "l1", 4)
    return dg.from_steps(
        "contraction-step",
        dg.DataColumn((y, v, w)),
        [(dg.prim("matmul-add", (0, 1, 2)),)],
    )


_SC_FEATURE = 2  # value feature width used when checking the softmax law


def _softmax_contraction_function(n: int, d_feat: int = _SC_FEATURE) -> dg.Diagram:
    ax_x = dg.Axis("k", n)
    ax_d = dg.Axis("f", d_feat)
    s = dg.ArrayShape((ax_x,), "l1", 4)
    v = dg.ArrayShape((ax_x, ax_d), "l1", 4)
    softmax = dg.prim("softmax", (0,))
    combine = dg.prim(
        "contraction",
        (0, 1),
        weaves=(dg.Weave(ax_d, targets=(1,), positions=(1,)),),
    )
    return dg.from_steps(
        "softmax-contraction-full",
        dg.DataColumn((s, v)),
        [(softmax, dg.identity(1)), (combine,)],
    )


def _softmax_contraction_accumulator(m: int, d_feat: int = _SC_FEATURE) -> dg.Diagram:
    ax_x = dg.Axis("k", m)
    ax_d = dg.Axis("f", d_feat)
    y = dg.ArrayShape((ax_d,), "l1", 4)
    scalar = dg.ArrayShape((), "l1", 4)
    s = dg.ArrayShape((ax_x,), "l1", 4)
    v = dg.ArrayShape((ax_x, ax_d), "l1", 4)
    smu = dg.prim("softmax-unscaled", (4, 1, 2, 3))
    combine = dg.prim(
        "contraction",
        (1, 6),
        weaves=(dg.Weave(ax_d, targets=(1,), positions=(1,)),),
    )
    addv = dg.prim(
        "add", (0, 1), weaves=(dg.Weave(ax_d, targets=(0, 1), positions=(0, 0)),)
    )
    return dg.from_steps(
        "softmax-contraction-step",
        dg.DataColumn((y, scalar, scalar, scalar, s, v)),
        [
            # (y', p, mu, delta, z, V)
            (dg.identity(0), smu, dg.identity(5)),
            # keep one delta for the carried state, spend one on rescaling y'
            (
                dg.identity(0),
                dg.identity(1),
                dg.identity(2),
                dg.prim("copy", (3,), n=2),
                dg.identity(4),
                dg.identity(5),
            ),
            # (y'*delta, p.V, mu, delta, z)
            (
                dg.prim("scale", (0, 4)),
                combine,
                dg.identity(2),
                dg.identity(3),
                dg.identity(5),
            ),
            (addv, dg.identity(2), dg.identity(3), dg.identity(4)),
        ],
    )


def _verify_law(spec: KernelSpec) -> None:
    """Check B(F(first), rest) == F(whole) on small sizes; F := B from init."""
    for n, m in LAW_SIZES:
        rng = np.random.default_rng(n * 31 + m)
        full = spec.build_function(n + m)
        segs = full.input_column.segments
        inputs = [
            rng.uniform(-1.0, 1.0, tuple(a.size for a in seg.axes)) for seg in segs
        ]
        init = _init_arrays(spec, full)
        whole = _run_steps(spec, init, [inputs])
        first = [x[:n] for x in inputs]
        rest = [x[n:] for x in inputs]
        stepped = _run_steps(spec, _run_steps(spec, init, [first]), [rest])
        for j in spec.law_mask:
            a, b = np.asarray(whole[j]), np.asarray(stepped[j])
            err = float(np.max(np.abs(a - b))) if a.size else 0.0
            if not np.allclose(a, b, rtol=LAW_TOL, atol=LAW_TOL):
                raise KernelLawError(
                    f"kernel {spec.name!r}: accumulator law fails at sizes "
                    f"({n},{m}), state component {j}: |diff| = {err:.3e}, "
                    f"counterexample inputs drawn with seed {n * 31 + m}"
                )


def _init_arrays(spec: KernelSpec, full: dg.Diagram) -> list[np.ndarray]:
    b = spec.build_accumulator(1)
    state_segs = b.input_column.segments[: spec.state_arity]
    return [
        np.full(tuple(a.size for a in seg.axes), v)
        for seg, v in zip(state_segs, spec.init_values)
    ]


def _run_steps(
    spec: KernelSpec, state: Sequence[np.ndarray], chunks: Sequence[Sequence[np.ndarray]]
) -> list[np.ndarray]:
    out = list(state)
    for chunk in chunks:
        m = int(np.asarray(chunk[0]).shape[0])
        b = spec.build_accumulator(m)
        out = oracle.evaluate_raw(b, [*out, *chunk])
    return out


_REGISTRY: dict[str, KernelSpec] = {}
_BUILTINS_DONE = False


def register_kernel(spec: KernelSpec) -> dict[str, KernelSpec]:
    """Verify the accumulator law, then add the kernel to the registry."""
    _verify_law(spec)
    _REGISTRY[spec.name] = spec
    return _REGISTRY


def _ensure_builtins() -> None:
    global _BUILTINS_DONE
    if _BUILTINS_DONE:
        return
    register_kernel(
        KernelSpec(
            name="contraction",
            spine=("contraction",),
            state_arity=1,
            init_values=(0.0,),
            law_mask=(0,),
            aux_indices=(),
            build_function=_contraction_function,
            build_accumulator=_contraction_accumulator,
        )
    )
    register_kernel(
        KernelSpec(
            name="softmax-contraction",
            spine=("softmax", "contraction"),
            state_arity=4,
            init_values=(0.0, NEG_INF, 0.0, 0.0),
            law_mask=(0, 1, 3),
            aux_indices=(1, 2, 3),
            build_function=_softmax_contraction_function,
            build_accumulator=_softmax_contraction_accumulator,
        )
    )
    _BUILTINS_DONE = True


def registry() -> dict[str, KernelSpec]:
    _ensure_builtins()
    return dict(_REGISTRY)


# ---------------------------------------------------------------------------
# certification


@dataclass(frozen=True)
class NotStreamable:
    axis: str
    reason: str

    def __bool__(self) -> bool:
        return False


@dataclass(frozen=True)
class StreamabilityCertificate:
    diagram: str
    digest: str
    axis: str
    kernel: str
    derivation: tuple[tuple[str, Any], ...]
    region: tuple[int, int]
    e_nodes: tuple[tuple[int, int], ...]
    suffix_nodes: tuple[tuple[int, int], ...]
    maintained: tuple[dg.ArrayShape, ...]
    auxiliary: tuple[dg.ArrayShape, ...]
    source: dg.Diagram = field(repr=False)
    accumulator: dg.Diagram = field(repr=False)

    def __bool__(self) -> bool:
        return True


def _digest(d: dg.Diagram) -> str:
    return hashlib.sha256(dg.dumps(dg.strip_relabels(d)).encode()).hexdigest()[:16]


def _weave_axis_names(node: dg.OpNode) -> list[str]:
    return [w.axis.name for w in node.weaves]


def _node_output_segments(
    d: dg.Diagram, ci: int, target_ni: int
) -> tuple[int, list[dg.ArrayShape]]:
    """Outputs of one node: (first index in the next data column, shapes)."""
    col = d.columns[ci - 1]
    start = 0
    for ni, node in enumerate(d.columns[ci]):
        outs = dg.node_io(node, col)
        if ni == target_ni:
            return start, outs
        start += len(outs)
    raise AssertionError("node index out of range")


def check_streamable(
    d: dg.Diagram, axis: str
) -> StreamabilityCertificate | NotStreamable:
    """Certify streaming over ``axis`` or explain the blocking construct."""
    _ensure_builtins()
    sizes = d.axis_sizes()
    if axis not in sizes:
        return NotStreamable(axis, f"axis {axis!r} does not occur in {d.name!r}")
    out_axes = {n for seg in d.output_column.segments for n in seg.axis_names()}
    if axis in out_axes:
        return NotStreamable(
            axis,
            f"the output retains axis {axis!r}: memory for the result grows "
            f"with the input, so no fixed-size carried state exists",
        )
    if not any(
        axis in seg.axis_names() for seg in d.input_column.segments
    ):
        return NotStreamable(axis, f"axis {axis!r} is not carried by any input")

    touching: list[tuple[int, int, dg.OpNode, str]] = []
    for ci, ni, node in d.iter_nodes():
        col = d.columns[ci - 1]
        if not any(axis in col.segments[t].axis_names() for t in node.takes):
            continue
        if node.kind in dg.SHAPE_GENERIC_KINDS:
            touching.append((ci, ni, node, "carrier"))
            continue
        if node.kind == "composite":
            return NotStreamable(
                axis, f"composite node at op column {ci} hides the use of {axis!r}"
            )
        if axis in _weave_axis_names(node):
            touching.append((ci, ni, node, "weaved"))
            continue
        base = dg._strip_weaves(node, [col.segments[t] for t in node.takes])
        if any(axis in seg.axis_names() for seg in base):
            touching.append((ci, ni, node, "operates"))
        else:
            touching.append((ci, ni, node, "carrier"))

    strict = [(ci, ni, n, c) for ci, ni, n, c in touching if c in ("weaved", "operates")]
    op_idx = [i for i, item in enumerate(strict) if item[3] == "operates"]
    if not op_idx:
        return NotStreamable(
            axis,
            f"no op consumes axis {axis!r}; it is only carried, yet absent from "
            f"the output",
        )
    first_op = op_idx[0]
    late_weaved = [strict[i] for i in range(first_op, len(strict)) if strict[i][3] == "weaved"]
    if late_weaved:
        ci, ni, node, _ = late_weaved[0]
        return NotStreamable(
            axis,
            f"{node.kind} node at op column {ci} maps over {axis!r} after the "
            f"reduction has started; chunk-local work must precede it",
        )
    suffix = [strict[i] for i in op_idx]
    spine = tuple(item[2].kind for item in suffix)
    cols_seen = [item[0] for item in suffix]
    if len(set(cols_seen)) != len(cols_seen):
        return NotStreamable(
            axis, f"two ops consume {axis!r} in the same column; no kernel matches"
        )
    kernel = next((k for k in _REGISTRY.values() if k.spine == spine), None)
    if kernel is None:
        known = sorted(" > ".join(k.spine) for k in _REGISTRY.values())
        return NotStreamable(
            axis,
            f"ops consuming {axis!r} form the sequence {' > '.join(spine)}, "
            f"which matches no registered kernel (known: {'; '.join(known)})",
        )
    if len(suffix) == 2:
        # the reduction must consume what the softmax produced
        sm_ci, sm_ni, sm_node, _ = suffix[0]
        co_ci, co_ni, co_node, _ = suffix[1]
        if co_ci != sm_ci + 2:
            return NotStreamable(
                axis,
                f"softmax (op column {sm_ci}) and contraction (op column {co_ci}) "
                f"are not adjacent",
            )
        start, _ = _node_output_segments(d, sm_ci, sm_ni)
        if start not in co_node.takes:
            return NotStreamable(
                axis, "the contraction does not consume the softmax output"
            )

    last = suffix[-1]
    y_start, y_outs = _node_output_segments(d, last[0], last[1])
    maintained = tuple(y_outs)
    level = maintained[0].level if maintained else "l1"
    if kernel.aux_indices:
        sm_node = suffix[0][2]
        aux_axes = tuple(w.axis for w in sm_node.weaves)
        sm_col = d.columns[suffix[0][0] - 1]
        quant = sm_col.segments[sm_node.takes[0]].quant
        aux = dg.ArrayShape(aux_axes, level, quant)
        auxiliary = (aux, aux, aux)
    else:
        auxiliary = ()

    e_nodes = tuple((ci, ni) for ci, ni, _, c in strict[:first_op])
    suffix_nodes = tuple((ci, ni) for ci, ni, _, _ in suffix)
    region = (min(ci for ci, *_ in touching), max(ci for ci, *_ in touching))
    derivation: list[tuple[str, Any]] = [("kernel-base", kernel.name)]
    if e_nodes:
        derivation.append(
            ("compose-E", tuple(d.columns[ci][ni].kind for ci, ni in e_nodes))
        )
    outer = sorted(
        {
            w
            for _, _, node, _ in strict
            for w in _weave_axis_names(node)
            if w != axis
        }
    )
    if outer:
        derivation.append(("weave", tuple(outer)))
    pre = region[0] > 1 or any(c == "carrier" for *_, c in touching)
    post = region[1] < len(d.columns) - 2
    if pre or post:
        derivation.append(("head-tail", (int(pre), int(post))))

    cert = StreamabilityCertificate(
        diagram=d.name,
        digest=_digest(d),
        axis=axis,
        kernel=kernel.name,
        derivation=tuple(derivation),
        region=region,
        e_nodes=e_nodes,
        suffix_nodes=suffix_nodes,
        maintained=maintained,
        auxiliary=auxiliary,
        source=d,
        accumulator=kernel.build_accumulator(1),
    )
    return cert


def verify_certificate(cert: StreamabilityCertificate, d: dg.Diagram) -> bool:
    """Replay the derivation: re-certify and require a structural match."""
    if cert.digest != _digest(d):
        return False
    fresh = check_streamable(d, cert.axis)
    if isinstance(fresh, NotStreamable):
        return False
    return (
        fresh.kernel == cert.kernel
        and fresh.derivation == cert.derivation
        and fresh.region == cert.region
        and fresh.e_nodes == cert.e_nodes
        and fresh.suffix_nodes == cert.suffix_nodes
        and fresh.maintained == cert.maintained
        and fresh.auxiliary == cert.auxiliary
    )


def certificate_to_json(cert: StreamabilityCertificate) -> dict[str, Any]:
    return {
        "diagram": cert.diagram,
        "digest": cert.digest,
        "axis": cert.axis,
        "kernel": cert.kernel,
        "derivation": [[rule, list(arg) if isinstance(arg, tuple) else arg]
                       for rule, arg in cert.derivation],
        "region": list(cert.region),
        "e_nodes": [list(x) for x in cert.e_nodes],
        "suffix_nodes": [list(x) for x in cert.suffix_nodes],
        "maintained": [dg._segment_to_json(s) for s in cert.maintained],
        "auxiliary": [dg._segment_to_json(s) for s in cert.auxiliary],
        "accumulator": dg.diagram_to_json(cert.accumulator),
    }


def dumps_certified(d: dg.Diagram, certs: Sequence[StreamabilityCertificate]) -> str:
    doc = dg.diagram_to_json(d)
    doc["certificates"] = [certificate_to_json(c) for c in certs]
    return json.dumps(doc, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# expansion


def _ywalk(y_axes: Sequence[str], weave_order: Sequence[str]) -> dict[str, int]:
    """Strip position of each weave axis within the maintained shape."""
    remaining = [a for a in y_axes]
    pos: dict[str, int] = {}
    for a in weave_order:
        if a not in remaining:
            raise StreamabilityError(
                f"weave axis {a!r} missing from maintained shape {tuple(y_axes)}"
            )
        pos[a] = remaining.index(a)
        remaining.remove(a)
    return pos


def expand(d: dg.Diagram, axis: str, s: int) -> dg.Diagram:
    """Materialize the stream: head, per-chunk accumulator steps, tail."""
    cert = check_streamable(dg.strip_relabels(d), axis)
    if isinstance(cert, NotStreamable):
        raise StreamabilityError(f"cannot expand {d.name!r}: {cert.reason}")
    return expand_certified(dg.strip_relabels(d), cert, s)


def expand_certified(
    d: dg.Diagram, cert: StreamabilityCertificate, s: int
) -> dg.Diagram:
    axis = cert.axis
    size = d.axis_sizes()[axis]
    if not isinstance(size, int):
        raise StreamabilityError(f"axis {axis!r} has symbolic size {size!r}")
    if not isinstance(s, int) or s < 1:
        raise StreamabilityError(f"chunk size must be a positive int, got {s!r}")
    parts = dg.partition_sizes(size, s)
    n_chunks = len(parts)
    kernel = registry()[cert.kernel]
    first_ci, last_ci = cert.region
    suffix = list(cert.suffix_nodes)
    suffix_set = set(suffix)

    # classify nodes of the region columns
    region_cols = [ci for ci in range(first_ci, last_ci + 1) if not isinstance(d.columns[ci], dg.DataColumn)]
    hoisted: set[tuple[int, int]] = set()
    for ci in region_cols:
        col = d.columns[ci - 1]
        for ni, node in enumerate(d.columns[ci]):
            touches = any(axis in col.segments[t].axis_names() for t in node.takes)
            if not touches and (ci, ni) not in suffix_set:
                hoisted.add((ci, ni))
    # a hoisted node must not depend on per-chunk values; with the region
    # starting at the first op column this means it may only consume diagram
    # inputs or outputs of other hoisted nodes, which the walk below enforces.

    y_shape = cert.maintained[0]
    y_axes = list(y_shape.axis_names())
    last_node = d.columns[suffix[-1][0]][suffix[-1][1]]
    y_weave_order = [w.axis.name for w in last_node.weaves]
    ypos = _ywalk(y_axes, y_weave_order)
    y_axis_objs = {w.axis.name: w.axis for w in last_node.weaves}
    if kernel.aux_indices:
        sm_node = d.columns[suffix[0][0]][suffix[0][1]]
        aux_axes = [w.axis.name for w in sm_node.weaves]
    else:
        sm_node = None
        aux_axes = []

    def chunk_axis(k: int) -> dg.Axis:
        src = None
        for seg in d.input_column.segments:
            for ax in seg.axes:
                if ax.name == axis:
                    src = ax
        assert src is not None
        return dg.Axis(f"{axis}__c{k}", parts[k], src.divisors)

    def retarget(node: dg.OpNode, k: int) -> tuple[dg.Weave, ...]:
        out = []
        for w in node.weaves:
            if w.axis.name == axis:
                w = replace(w, axis=chunk_axis(k))
            out.append(w)
        return tuple(out)

    columns: list[list[tuple[dg.OpNode, list[Any]]]] = []

    def emit(nodes_keys: list[tuple[dg.OpNode, list[Any]]]) -> None:
        columns.append(nodes_keys)

    # ---- prologue: split the carrying inputs
    in_segs = d.input_column.segments
    split_nodes: list[tuple[dg.OpNode, list[Any]]] = []
    for i, seg in enumerate(in_segs):
        if axis in seg.axis_names():
            node = dg.prim(
                "split",
                (i,),
                axis=axis,
                parts=tuple((f"{axis}__c{k}", parts[k]) for k in range(n_chunks)),
            )
            split_nodes.append((node, [("chunk", k, i) for k in range(n_chunks)]))
        else:
            split_nodes.append((dg.identity(i), [("in", i)]))
    emit(split_nodes)

    # ---- prologue: hoisted nodes, one emitted column per original column
    omap: dict[int, Any] = {i: ("in", i) for i in range(len(in_segs))}
    live: list[Any] = [key for _, keys in split_nodes for key in keys]

    def keyidx(key: Any) -> int:
        return live.index(key)

    resident_keys: set[Any] = set()
    for ci in region_cols:
        here = [(ni, n) for ni, n in enumerate(d.columns[ci]) if (ci, ni) in hoisted]
        next_omap: dict[int, Any] = {}
        start = 0
        col_nodes: list[tuple[dg.OpNode, list[Any]]] = []
        consumed: set[Any] = set()
        for ni, node in enumerate(d.columns[ci]):
            outs = dg.node_io(node, d.columns[ci - 1])
            if (ci, ni) in hoisted:
                try:
                    takes = tuple(keyidx(omap[t]) for t in node.takes)
                except (KeyError, ValueError):
                    raise StreamabilityError(
                        f"node at op column {ci} runs once but consumes a "
                        f"per-chunk value; cannot expand"
                    )
                out_keys = [("res", ci, ni, j) for j in range(len(outs))]
                col_nodes.append((replace(node, takes=takes, relabels=()), out_keys))
                consumed.update(omap[t] for t in node.takes)
                for j in range(len(outs)):
                    next_omap[start + j] = out_keys[j]
            else:
                for j in range(len(outs)):
                    next_omap[start + j] = ("defer", ci, ni, j)
            start += len(outs)
        if col_nodes:
            for key in live:
                if key not in consumed:
                    col_nodes.append((dg.identity(keyidx(key)), [key]))
            order = sorted(col_nodes, key=lambda nk: min(nk[0].takes) if nk[0].takes else -1)
            emit(order)
            live = [key for _, keys in order for key in keys]
        # keep omap entries that already resolved, merge the new ones
        omap = next_omap

    # ---- prologue: initial state
    state_keys = [("state", j) for j in range(kernel.state_arity)]
    init_shapes: list[dg.ArrayShape] = [y_shape, *cert.auxiliary]
    init_nodes: list[tuple[dg.OpNode, list[Any]]] = []
    for j, (shape, value) in enumerate(zip(init_shapes, kernel.init_values)):
        node = dg.prim(
            "const", (), axes=tuple(shape.axes), level=shape.level,
            quant=shape.quant, value=value,
        )
        init_nodes.append((node, [("state", j)]))
    for key in live:
        init_nodes.append((dg.identity(keyidx(key)), [key]))
    emit(init_nodes)
    live = [key for _, keys in init_nodes for key in keys]

    residents_needed: set[Any] = set()

    # determine which once-computed values the per-chunk body consumes
    def body_sources() -> set[Any]:
        needed: set[Any] = set()
        omap_sim: dict[int, Any] = {
            i: (("carry", i) if axis in in_segs[i].axis_names() else ("in", i))
            for i in range(len(in_segs))
        }
        for ci in region_cols:
            start = 0
            nxt: dict[int, Any] = {}
            for ni, node in enumerate(d.columns[ci]):
                outs = dg.node_io(node, d.columns[ci - 1])
                if (ci, ni) in hoisted:
                    for j in range(len(outs)):
                        nxt[start + j] = ("res", ci, ni, j)
                else:
                    for t in node.takes:
                        src = omap_sim.get(t)
                        if src is not None and src[0] in ("in", "res"):
                            needed.add(src)
                    for j in range(len(outs)):
                        nxt[start + j] = ("body", ci, ni, j)
                start += len(outs)
            omap_sim = nxt
        return needed

    residents_needed = body_sources()

    # ---- per-chunk body
    for k in range(n_chunks):
        ax_k = chunk_axis(k)
        lastk = k == n_chunks - 1
        # stage column: copy residents still needed later, rename chunk keys
        stage: list[tuple[dg.OpNode, list[Any]]] = []
        for key in live:
            if key in residents_needed and not lastk:
                stage.append(
                    (dg.prim("copy", (keyidx(key),), n=2), [key, ("use", key)])
                )
            elif key in residents_needed:
                stage.append((dg.identity(keyidx(key)), [("use", key)]))
            else:
                stage.append((dg.identity(keyidx(key)), [key]))
        if residents_needed:
            emit(stage)
            live = [key for _, keys in stage for key in keys]

        def body_key(src: Any) -> Any:
            if src[0] in ("in", "res"):
                return ("use", src)
            return src

        omap_k: dict[int, Any] = {}
        for i in range(len(in_segs)):
            if axis in in_segs[i].axis_names():
                omap_k[i] = ("chunk", k, i)
            else:
                omap_k[i] = ("in", i)
        for ci in region_cols:
            start = 0
            nxt: dict[int, Any] = {}
            emitted: list[tuple[dg.OpNode, list[Any]]] = []
            consumed: set[Any] = set()
            post_cols: list[list[tuple[dg.OpNode, list[Any]]]] = []
            for ni, node in enumerate(d.columns[ci]):
                outs = dg.node_io(node, d.columns[ci - 1])
                if (ci, ni) in hoisted:
                    for j in range(len(outs)):
                        nxt[start + j] = ("res", ci, ni, j)
                    start += len(outs)
                    continue
                srcs = [body_key(omap_k[t]) for t in node.takes]
                if (ci, ni) == (suffix[0][0], suffix[0][1]) and kernel.aux_indices:
                    # softmax -> running softmax taking the carried state
                    takes = (
                        keyidx(srcs[0]),
                        keyidx(("state", 1)),
                        keyidx(("state", 2)),
                        keyidx(("state", 3)),
                    )
                    w = []
                    for wv in node.weaves:
                        w.append(
                            dg.Weave(
                                wv.axis,
                                targets=(0, 1, 2, 3),
                                positions=(wv.positions[0], 0, 0, 0),
                                out_positions=(wv.out_position(0), 0, 0, 0),
                            )
                        )
                    smu = dg.OpNode(
                        "softmax-unscaled", takes, tuple(w), attrs=node.attrs
                    )
                    emitted.append(
                        (smu, [("p", k), ("state", 1), ("state", 2), ("state", 3)])
                    )
                    consumed.update(
                        {srcs[0], ("state", 1), ("state", 2), ("state", 3)}
                    )
                    nxt[start] = ("p", k)
                    # delta split happens in its own column right after
                    post_cols.append([])
                elif (ci, ni) == (suffix[-1][0], suffix[-1][1]):
                    cw = retarget(node, k)
                    if not kernel.aux_indices:
                        # running sum: fold the chunk straight into the state
                        w = []
                        for wv in cw:
                            if wv.axis.name == ax_k.name:
                                w.append(wv)
                                continue
                            tgt = (0,) + tuple(t + 1 for t in wv.targets)
                            pos = (ypos[wv.axis.name],) + wv.positions
                            w.append(
                                dg.Weave(
                                    wv.axis, targets=tgt, positions=pos,
                                    out_positions=(ypos[wv.axis.name],),
                                )
                            )
                        takes = (keyidx(("state", 0)),) + tuple(keyidx(s_) for s_ in srcs)
                        node2 = dg.OpNode("matmul-add", takes, tuple(w), attrs=node.attrs)
                        emitted.append((node2, [("state", 0)]))
                        consumed.update({("state", 0), *srcs})
                        nxt[start] = ("state", 0)
                    else:
                        # rescale the carry while reducing the chunk, then add
                        takes = tuple(keyidx(s_) for s_ in srcs)
                        node2 = dg.OpNode(node.kind, takes, cw, attrs=node.attrs)
                        emitted.append((node2, [("pv", k)]))
                        consumed.update(srcs)
                        scale_w = []
                        for a in y_weave_order:
                            tgt = [0]
                            pos = [ypos[a]]
                            if a in aux_axes:
                                tgt.append(1)
                                pos.append(0)
                            scale_w.append(
                                dg.Weave(
                                    y_axis_objs[a], targets=tuple(tgt),
                                    positions=tuple(pos),
                                    out_positions=(ypos[a],),
                                )
                            )
                        emitted.append(
                            (
                                dg.OpNode(
                                    "scale",
                                    (keyidx(("state", 0)), keyidx(("dspend", k))),
                                    tuple(scale_w),
                                ),
                                [("yscaled", k)],
                            )
                        )
                        consumed.update({("state", 0), ("dspend", k)})
                        add_w = tuple(
                            dg.Weave(
                                y_axis_objs[a], targets=(0, 1),
                                positions=(ypos[a], ypos[a]),
                                out_positions=(ypos[a],),
                            )
                            for a in y_weave_order
                        )
                        post_cols.append(
                            [
                                (
                                    dg.OpNode("add", (0, 1), add_w),
                                    [("state", 0)],
                                )
                            ]
                        )
                        nxt[start] = ("state", 0)
                else:
                    cw = retarget(node, k)
                    takes = tuple(keyidx(s_) for s_ in srcs)
                    node2 = dg.OpNode(node.kind, takes, cw, attrs=node.attrs)
                    out_keys = [("body", k, ci, ni, j) for j in range(len(outs))]
                    emitted.append((node2, out_keys))
                    consumed.update(srcs)
                    for j in range(len(outs)):
                        nxt[start + j] = out_keys[j]
                start += len(outs)
            if not emitted:
                omap_k = nxt
                continue
            # pass everything else through
            for key in live:
                if key not in consumed:
                    emitted.append((dg.identity(keyidx(key)), [key]))
            emitted.sort(key=lambda nk: min(nk[0].takes) if nk[0].takes else 10**9)
            emit(emitted)
            live = [key for _, keys in emitted for key in keys]
            # follow-up columns tied to this original column
            for extra in post_cols:
                if not extra:
                    # split delta into carried copy and spend copy
                    nodes: list[tuple[dg.OpNode, list[Any]]] = []
                    for key in live:
                        if key == ("state", 2):
                            nodes.append(
                                (
                                    dg.prim("copy", (keyidx(key),), n=2),
                                    [("state", 2), ("dspend", k)],
                                )
                            )
                        else:
                            nodes.append((dg.identity(keyidx(key)), [key]))
                    emit(nodes)
                    live = [key for _, keys in nodes for key in keys]
                else:
                    nodes = []
                    used: set[Any] = set()
                    for node2, out_keys in extra:
                        if node2.kind == "add":
                            node2 = replace(
                                node2,
                                takes=(
                                    keyidx(("yscaled", k)),
                                    keyidx(("pv", k)),
                                ),
                            )
                            used.update({("yscaled", k), ("pv", k)})
                        nodes.append((node2, out_keys))
                    for key in live:
                        if key not in used:
                            nodes.append((dg.identity(keyidx(key)), [key]))
                    nodes.sort(key=lambda nk: min(nk[0].takes) if nk[0].takes else 10**9)
                    emit(nodes)
                    live = [key for _, keys in nodes for key in keys]
            omap_k = nxt
        omap = omap_k

    # ---- tail
    if kernel.aux_indices:
        tail: list[tuple[dg.OpNode, list[Any]]] = []
        scale_w = []
        for a in y_weave_order:
            tgt = [0]
            pos = [ypos[a]]
            if a in aux_axes:
                tgt.append(1)
                pos.append(0)
            scale_w.append(
                dg.Weave(
                    y_axis_objs[a], targets=tuple(tgt), positions=tuple(pos),
                    out_positions=(ypos[a],),
                )
            )
        tail.append(
            (
                dg.OpNode(
                    "scale",
                    (keyidx(("state", 0)), keyidx(("state", 3))),
                    tuple(scale_w),
                    attrs=dg.freeze_attrs({"reciprocal": True}),
                ),
                [("state", 0)],
            )
        )
        consumed = {("state", 0), ("state", 3)}
        for key in live:
            if key in (("state", 1), ("state", 2)):
                tail.append((dg.prim("drop", (keyidx(key),)), []))
                consumed.add(key)
            elif key not in consumed:
                tail.append((dg.identity(keyidx(key)), [key]))
        tail.sort(key=lambda nk: min(nk[0].takes) if nk[0].takes else 10**9)
        emit(tail)
        live = [key for _, keys in tail for key in keys]

    # ---- post-region columns
    # map the original data column after the region to expanded keys
    post_map: dict[int, Any] = {}
    for idx, src in omap.items():
        if src[0] == "body" and len(src) == 5:
            post_map[idx] = src
        else:
            post_map[idx] = src
    y_start, _ = _node_output_segments(d, suffix[-1][0], suffix[-1][1])
    post_map[y_start] = ("state", 0)
    cur_map = post_map
    for ci in range(last_ci + 1, len(d.columns)):
        col = d.columns[ci]
        if isinstance(col, dg.DataColumn):
            continue
        start = 0
        nxt2: dict[int, Any] = {}
        nodes = []
        for ni, node in enumerate(col):
            outs = dg.node_io(node, d.columns[ci - 1])
            src_keys = [cur_map[t] for t in node.takes]
            takes = tuple(keyidx(sk) for sk in src_keys)
            out_keys = [("post", ci, ni, j) for j in range(len(outs))]
            nodes.append((replace(node, takes=takes, relabels=()), out_keys))
            for j in range(len(outs)):
                nxt2[start + j] = out_keys[j]
            start += len(outs)
        nodes.sort(key=lambda nk: min(nk[0].takes) if nk[0].takes else 10**9)
        emit(nodes)
        live = [key for _, keys in nodes for key in keys]
        cur_map = nxt2

    op_columns = [tuple(node for node, _ in col) for col in columns]
    out = dg.from_steps(
        f"{d.name}[s:{axis}={s}]", d.input_column, op_columns
    )
    return dg.check(out)
