"""Stock diagram constructions.

Each builder assembles a well-known computation from the primitive set,
moving inputs from a far level (default ``l0``) to a near level (``l1``)
before computing.  Sizes may be ints or named parameters.
"""

from __future__ import annotations

from typing import Any

from .diagram import (
    Axis,
    ArrayShape,
    DataColumn,
    DEFAULT_QUANT,
    Diagram,
    Weave,
    check,
    from_steps,
    identity,
    prim,
    transfer,
    weave,
)

Size = int | str


def _beta_attrs(beta: Any, d: Size) -> dict[str, Any]:
    """Scores are scaled by d^-1/2 by default; pass ``beta=None`` to disable
    or a float to override."""
    if beta is True:
        return {"beta_rsqrt": d}
    if beta is None or beta is False:
        return {}
    return {"beta": float(beta)}


def canonical_matmul(
    a: Size,
    b: Size,
    c: Size,
    src: str = "l0",
    dst: str = "l1",
    quant: float = DEFAULT_QUANT,
    name: str = "matmul",
) -> Diagram:
    """(a,b) @ (b,c) -> (a,c): a contraction weaved over both free axes."""
    ax_b = Axis("b", b)
    v = ArrayShape((ax_b,), src, quant)
    w = ArrayShape((ax_b,), src, quant)
    core = from_steps(
        name,
        DataColumn((v, w)),
        [
            (transfer(0, src, dst), transfer(1, src, dst)),
            (prim("contraction", (0, 1)),),
            (transfer(0, dst, src),),
        ],
    )
    d = weave(core, Axis("a", a), targets=(0,))
    d = weave(d, Axis("c", c), targets=(1,), positions={1: 1}, out_position=1)
    return check(d)


def canonical_attention(
    q: Size,
    x: Size,
    d: Size,
    beta: Any = True,
    src: str = "l0",
    dst: str = "l1",
    quant: float = DEFAULT_QUANT,
    name: str = "attention",
) -> Diagram:
    """O = SoftMax(Q Kt) V with keys/values shared across queries.

    Built per query row: scores against every key, softmax over the key
    axis, then a weighted combination of values; finally weaved over the
    query axis with K and V broadcast.
    """
    ax_x = Axis("x", x)
    ax_d = Axis("d", d)
    q_row = ArrayShape((ax_d,), src, quant)
    keys = ArrayShape((ax_x, ax_d), src, quant)
    vals = ArrayShape((ax_x, ax_d), src, quant)
    score = prim(
        "contraction",
        (0, 1),
        weaves=(Weave(ax_x, targets=(1,), positions=(0,)),),
    )
    softmax = prim("softmax", (0,), **_beta_attrs(beta, d))
    combine = prim(
        "contraction",
        (0, 1),
        weaves=(Weave(ax_d, targets=(1,), positions=(1,)),),
    )
    core = from_steps(
        name,
        DataColumn((q_row, keys, vals)),
        [
            (transfer(0, src, dst), transfer(1, src, dst), transfer(2, src, dst)),
            (score, identity(2)),
            (softmax, identity(1)),
            (combine,),
            (transfer(0, dst, src),),
        ],
    )
    return check(weave(core, Axis("q", q), targets=(0,)))


def canonical_softmax_contraction(
    x: Size,
    d: Size,
    beta: Any = None,
    level: str = "l1",
    quant: float = DEFAULT_QUANT,
    name: str = "softmax-contraction",
) -> Diagram:
    """SoftMax of a score vector followed by a value contraction; the tail
    of attention, useful on its own when studying streamability."""
    ax_x = Axis("x", x)
    ax_d = Axis("d", d)
    scores = ArrayShape((ax_x,), level, quant)
    vals = ArrayShape((ax_x, ax_d), level, quant)
    softmax = prim("softmax", (0,), **_beta_attrs(beta, d))
    combine = prim(
        "contraction",
        (0, 1),
        weaves=(Weave(ax_d, targets=(1,), positions=(1,)),),
    )
    return check(
        from_steps(
            name,
            DataColumn((scores, vals)),
            [
                (softmax, identity(1)),
                (combine,),
            ],
        )
    )


def canonical_mha(
    h: Size,
    q: Size,
    x: Size,
    d: Size,
    beta: Any = True,
    src: str = "l0",
    dst: str = "l1",
    quant: float = DEFAULT_QUANT,
) -> Diagram:
    """Multi-head attention: every input carries the head axis."""
    base = canonical_attention(q, x, d, beta, src, dst, quant, name="mha")
    return check(weave(base, Axis("h", h), targets=(0, 1, 2)))


def canonical_gqa(
    g: Size,
    q: Size,
    x: Size,
    d: Size,
    h: Size | None = None,
    beta: Any = True,
    src: str = "l0",
    dst: str = "l1",
    quant: float = DEFAULT_QUANT,
) -> Diagram:
    """Grouped-query attention: ``g`` query heads share one key/value head.

    Only the queries carry the group axis; keys and values are broadcast.
    Pass ``h`` to add an outer axis of independent key/value heads.
    """
    base = canonical_attention(q, x, d, beta, src, dst, quant, name="gqa")
    d_out = weave(base, Axis("g", g), targets=(0,))
    if h is not None:
        d_out = weave(d_out, Axis("h", h), targets=(0, 1, 2))
    return check(d_out)


BUILDERS = {
    "matmul": canonical_matmul,
    "attention": canonical_attention,
    "softmax-contraction": canonical_softmax_contraction,
    "mha": canonical_mha,
    "gqa": canonical_gqa,
}
