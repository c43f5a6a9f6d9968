"""Group-size planning and transfer performance models.

Given a diagram whose weaved axes can be grouped, pick integer group sizes
that minimize the total transfer volume across the memory boundary subject
to a live-footprint budget at one level, and fit power-law models

    H(M) = sum_t alpha_t * M**(-beta_t)

to the optimized transfer curves.  Group sizes enter the transfer volume
through broadcast repeats (a segment that does not carry a grouped axis is
re-sent once per group), so larger groups trade footprint for traffic.

Two footprint conventions are supported and the chosen one is reported:

* ``exact``      streamed axes occupy one chunk (size 1) while resident,
* ``idealized``  streamed axes occupy no space, and each group size is
                 capped at its continuous optimum so the relaxed bound
                 stays an upper envelope of the integer plan.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import scipy.optimize
import sympy

from . import diagram as dg
from . import resources, streaming
from ._symbols import (
    SizeLike,
    evaluate,
    expr_from_json,
    expr_to_json,
    size_symbol,
    to_expr,
)

Expr = sympy.Expr

CONSTRAINT_MODES = ("exact", "idealized")

#: Exponents a fitted model may use: every nonnegative rational <= 1 with
#: denominator at most 4, plus the thirds that show up for cubic tilings.
SNAP_EXPONENTS: tuple[Fraction, ...] = (
    Fraction(0),
    Fraction(1, 4),
    Fraction(1, 3),
    Fraction(1, 2),
    Fraction(2, 3),
    Fraction(3, 4),
    Fraction(1),
)


class OptimizeError(ValueError):
    """Raised when a group plan cannot be produced."""


class InfeasibleError(OptimizeError):
    """The footprint budget is below the smallest achievable footprint."""

    def __init__(self, budget: float, minimum: float, level: str) -> None:
        self.budget = budget
        self.minimum = minimum
        self.level = level
        super().__init__(
            f"memory budget {budget} at {level!r} is below the minimum "
            f"achievable footprint {minimum}"
        )


class FitError(ValueError):
    """A power-law fit missed the samples by more than the tolerance."""

    def __init__(self, residual: float, tolerance: float) -> None:
        self.residual = residual
        self.tolerance = tolerance
        super().__init__(
            f"fitted model misses samples by {residual:.3%} "
            f"(tolerance {tolerance:.3%})"
        )


# ---------------------------------------------------------------------------
# performance model


def _beta_to_json(b: Fraction) -> str | int:
    return int(b) if b.denominator == 1 else f"{b.numerator}/{b.denominator}"


def _beta_from_json(v: Any) -> Fraction:
    return Fraction(v)


@dataclass(frozen=True)
class PerfModel:
    """Transfer volume as a sum of power laws in the footprint budget M.

    ``terms`` holds (alpha, beta) pairs meaning ``alpha * M**(-beta)``;
    alphas may be polynomials in axis sizes.  ``output_size`` is the
    element count of the produced array (the y polynomial), kept so
    downstream consumers can convert volumes into per-output rates.
    """

    name: str
    terms: tuple[tuple[Expr, Fraction], ...]
    output_size: Expr | None = None

    def __post_init__(self) -> None:
        terms = tuple(
            (sympy.Float(a) if isinstance(a, float) else to_expr(a), Fraction(b))
            for a, b in self.terms
        )
        for _, beta in terms:
            if beta < 0:
                raise OptimizeError(
                    f"model exponents must be >= 0 (transfers cannot grow "
                    f"with memory), got {beta}"
                )
        object.__setattr__(self, "terms", terms)
        if self.output_size is not None:
            object.__setattr__(self, "output_size", to_expr(self.output_size))

    def transfers(self, memory: SizeLike | None = None) -> Expr:
        """Symbolic H(M); substitute ``memory`` for M when given."""
        m = size_symbol("M")
        total = sympy.Integer(0)
        for alpha, beta in self.terms:
            total = total + alpha * m ** sympy.Rational(-beta.numerator, beta.denominator)
        if memory is not None:
            total = total.subs(m, to_expr(memory))
        return total

    def evaluate(self, memory: float, bindings: Mapping[str, int] | None = None) -> float:
        """Numeric H at a concrete budget (axis sizes from ``bindings``)."""
        total = 0.0
        for alpha, beta in self.terms:
            total += float(evaluate(alpha, bindings or {})) * memory ** float(-beta)
        return total

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "terms": [
                {"alpha_poly": expr_to_json(alpha), "beta": _beta_to_json(beta)}
                for alpha, beta in self.terms
            ],
            "y_poly": None if self.output_size is None else expr_to_json(self.output_size),
        }

    @staticmethod
    def from_json(obj: Mapping[str, Any]) -> "PerfModel":
        terms = tuple(
            (expr_from_json(t["alpha_poly"]), _beta_from_json(t["beta"]))
            for t in obj["terms"]
        )
        y = obj.get("y_poly")
        return PerfModel(
            name=obj.get("name", "model"),
            terms=terms,
            output_size=None if y is None else expr_from_json(y),
        )


def _sizes_or_symbols(
    names: Sequence[str], sizes: Mapping[str, SizeLike] | None
) -> dict[str, Expr]:
    out: dict[str, Expr] = {}
    for n in names:
        if sizes is not None and n in sizes:
            out[n] = to_expr(sizes[n])
        else:
            out[n] = size_symbol(n)
    if sizes is not None:
        extra = set(sizes) - set(names)
        if extra:
            raise OptimizeError(
                f"unknown size names {sorted(extra)}; expected a subset of {list(names)}"
            )
    return out


def closed_form(name: str, sizes: Mapping[str, SizeLike] | None = None) -> PerfModel:
    """Optimal-transfer model for a named canonical workload.

    Each model gives the transfer volume achievable with the best group
    sizes under a footprint budget M at the near level:

    * ``matmul``     H = 2abc * M**-1/2 + ac            (square output tiles)
    * ``attention``  H = 2qd + 4xqd^2 * M**-1           (query rows grouped)
    * ``mha``        attention scaled by h heads
    * ``gqa``        attention scaled by g queries sharing one key/value head
    """
    half = Fraction(1, 2)
    if name == "matmul":
        s = _sizes_or_symbols(("a", "b", "c"), sizes)
        a, b, c = s["a"], s["b"], s["c"]
        return PerfModel(
            name,
            ((2 * a * b * c, half), (a * c, Fraction(0))),
            output_size=a * c,
        )
    if name == "attention":
        s = _sizes_or_symbols(("q", "x", "d"), sizes)
        q, x, d = s["q"], s["x"], s["d"]
        return PerfModel(
            name,
            ((2 * q * d, Fraction(0)), (4 * x * q * d**2, Fraction(1))),
            output_size=q * d,
        )
    if name == "mha":
        s = _sizes_or_symbols(("h", "q", "x", "d"), sizes)
        h, q, x, d = s["h"], s["q"], s["x"], s["d"]
        return PerfModel(
            name,
            ((2 * h * q * d, Fraction(0)), (4 * h * x * q * d**2, Fraction(1))),
            output_size=h * q * d,
        )
    if name == "gqa":
        s = _sizes_or_symbols(("g", "q", "x", "d"), sizes)
        g, q, x, d = s["g"], s["q"], s["x"], s["d"]
        return PerfModel(
            name,
            ((2 * g * q * d, Fraction(0)), (4 * g * x * q * d**2, Fraction(1))),
            output_size=g * q * d,
        )
    raise OptimizeError(
        f"no closed form for {name!r}; known: matmul, attention, mha, gqa"
    )


def arithmetic_intensity(
    model: PerfModel,
    flops: SizeLike,
    memory: SizeLike | None = None,
) -> Expr:
    """Transfers issued per floating-point operation, H(M) / flops.

    Returns a symbolic expression in M (and any axis sizes left symbolic);
    substitute ``memory`` for M when given.  A kernel is bandwidth-bound
    when this exceeds the machine's transfer-per-flop service rate.
    """
    expr = sympy.cancel(model.transfers() / to_expr(flops))
    if memory is not None:
        expr = expr.subs(size_symbol("M"), to_expr(memory))
    return sympy.together(sympy.expand(expr))


# ---------------------------------------------------------------------------
# group-size optimization


@dataclass(frozen=True)
class GroupPlan:
    """Integer group sizes chosen for a diagram under a footprint budget."""

    diagram: str
    level: str
    budget: float
    mode: str
    groups: dict[str, int]
    streamed: tuple[str, ...]
    transfers: float
    footprint: float
    continuous: dict[str, float] = field(default_factory=dict)
    transfers_relaxed: float = math.nan

    def to_json(self) -> dict[str, Any]:
        return {
            "diagram": self.diagram,
            "level": self.level,
            "budget": self.budget,
            "mode": self.mode,
            "groups": dict(sorted(self.groups.items())),
            "streamed": list(self.streamed),
            "transfers": self.transfers,
            "footprint": self.footprint,
            "continuous": {k: self.continuous[k] for k in sorted(self.continuous)},
            "transfers_relaxed": self.transfers_relaxed,
        }


def _plan_symbols(prefix: str, axis: str) -> sympy.Symbol:
    return size_symbol(f"{prefix}_{axis}")


def _classify_axes(
    base: dg.Diagram,
) -> tuple[dg.Diagram, list[str], list[str]]:
    """Relabel every axis of ``base`` that supports it.

    Weaved-only axes become symbolic groups g_<axis>; operated axes with a
    streamability certificate become symbolic streams s_<axis>; the rest
    stay at full size.  Returns (relabeled diagram, grouped, streamed).
    """
    work = base
    grouped: list[str] = []
    streamed: list[str] = []
    for axis in base.axis_sizes():
        try:
            work = dg.relabel_group(work, axis, f"g_{axis}")
        except dg.DiagramError:
            cert = streaming.check_streamable(base, axis)
            if cert:
                work = dg.relabel_stream(work, axis, f"s_{axis}", cert)
                streamed.append(axis)
            continue
        grouped.append(axis)
    return work, grouped, streamed


def _lambdify(expr: Expr, syms: Sequence[sympy.Symbol]):
    fn = sympy.lambdify(list(syms), expr, "numpy")

    def call(vec: Sequence[float]) -> float:
        return float(fn(*vec))

    return call


def _bisect_uniform(
    col_fns: Sequence[Any], k: int, budget: float, hi: float
) -> float:
    """Largest uniform group value t with every column footprint <= budget."""

    def peak(t: float) -> float:
        v = [t] * k
        return max(f(v) for f in col_fns)

    lo = 1.0
    if peak(hi) <= budget:
        return hi
    if peak(lo) > budget:
        return lo
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if peak(mid) <= budget:
            lo = mid
        else:
            hi = mid
    return lo


def optimize_groups(
    d: dg.Diagram,
    memory: float,
    level: str = "l1",
    mode: str = "exact",
) -> GroupPlan:
    """Choose integer group sizes minimizing total transfer volume.

    Any relabels already on ``d`` are stripped; every weaved-only axis is
    considered for grouping and every operated axis with a streamability
    certificate is streamed.  The objective is the idealized transfer
    volume (repeats size/g, independent of stream chunking); the footprint
    constraint at ``level`` follows ``mode`` (see module docstring).

    The relaxed problem is solved with SLSQP from several starts, then an
    integer lattice around the relaxed optimum (plus full-size corners) is
    enumerated and locally polished.  Ties prefer larger groups, then
    lexicographically larger tuples.  Raises ``InfeasibleError`` when even
    unit groups exceed the budget.
    """
    if mode not in CONSTRAINT_MODES:
        raise OptimizeError(
            f"mode must be one of {CONSTRAINT_MODES}, got {mode!r}"
        )
    if memory <= 0:
        raise OptimizeError(f"memory budget must be positive, got {memory}")
    base = dg.strip_relabels(d)
    axis_sizes = base.axis_sizes()
    for name, size in axis_sizes.items():
        if not isinstance(size, int):
            raise OptimizeError(
                f"optimize_groups needs concrete axis sizes; {name!r} is {size!r}"
            )
    work, grouped, streamed = _classify_axes(base)

    g_syms = [_plan_symbols("g", a) for a in grouped]
    stream_sub = {
        _plan_symbols("s", a): (sympy.Integer(1) if mode == "exact" else sympy.Integer(0))
        for a in streamed
    }

    h_expr = sympy.expand(resources.total_transfer(work, mode="idealized"))
    h_expr = h_expr.subs(stream_sub)
    col_exprs = [
        sympy.expand(c.subs(stream_sub)) for c in resources.memory_columns(work, level)
    ]
    h_fn = _lambdify(h_expr, g_syms)
    col_fns = [_lambdify(c, g_syms) for c in col_exprs]

    k = len(grouped)
    ubounds = [float(axis_sizes[a]) for a in grouped]

    # Axes absent from the objective (carried by every transferred segment,
    # so never re-sent) only consume footprint; solve without them and raise
    # them afterwards per the larger-group tie-break.
    active = [i for i in range(k) if g_syms[i] in h_expr.free_symbols]
    free = [i for i in range(k) if i not in active]

    if k == 0:
        foot = max((float(sympy.Float(c)) for c in col_exprs), default=0.0)
        if foot > memory + 1e-9:
            raise InfeasibleError(memory, foot, level)
        h0 = float(sympy.Float(h_expr))
        return GroupPlan(
            diagram=d.name,
            level=level,
            budget=memory,
            mode=mode,
            groups={},
            streamed=tuple(streamed),
            transfers=h0,
            footprint=foot,
            continuous={},
            transfers_relaxed=h0,
        )

    ones = [1.0] * k
    minimum = max(f(ones) for f in col_fns)
    if minimum > memory + 1e-9:
        raise InfeasibleError(memory, minimum, level)

    def embed(sub: Sequence[float]) -> list[float]:
        v = [1.0] * k
        for j, i in enumerate(active):
            v[i] = float(sub[j])
        return v

    # Relaxed optimum over the active axes: SLSQP on the log objective with
    # normalized constraints (raw transfer counts reach 1e9+ and break the
    # line search otherwise).
    best_x = ones
    if active:
        def log_h(sub: Sequence[float]) -> float:
            return math.log(max(h_fn(embed(sub)), 1e-300))

        cons = [
            {"type": "ineq", "fun": (lambda sub, f=f: 1.0 - f(embed(sub)) / memory)}
            for f in col_fns
        ]
        ub_a = [ubounds[i] for i in active]
        bounds = [(1.0, ub) for ub in ub_a]
        col_a = [(lambda sub, f=f: f(embed(sub))) for f in col_fns]
        uniform = _bisect_uniform(col_a, len(active), memory, max(ub_a))
        starts = [
            [1.0] * len(active),
            [min(ub, uniform) for ub in ub_a],
            [math.sqrt(ub) for ub in ub_a],
            list(ub_a),
        ]
        best_sub: list[float] | None = None
        best_h = math.inf
        slack = 1e-4  # boundary iterates may overshoot; they only seed
        for x0 in starts:
            res = scipy.optimize.minimize(
                log_h,
                np.clip(x0, 1.0, ub_a),
                method="SLSQP",
                bounds=bounds,
                constraints=cons,
                options={"maxiter": 200, "ftol": 1e-12},
            )
            x = [float(v) for v in np.clip(res.x, 1.0, ub_a)]
            if max(f(x) for f in col_a) <= memory * (1 + slack):
                h = h_fn(embed(x))
                if h < best_h:
                    best_h, best_sub = h, x
        if best_sub is not None:
            best_x = embed(best_sub)
    continuous = {grouped[i]: best_x[i] for i in active}

    # In idealized mode cap each active group at its relaxed optimum so the
    # continuous bound remains an envelope of the integer plan.  Snap
    # near-integer optima before flooring so numerical fuzz cannot move
    # the cap by one.
    def cap_of(c: float) -> int:
        r = round(c)
        return int(r) if abs(c - r) < 1e-6 else math.floor(c)

    caps = [
        cap_of(best_x[i]) if (mode == "idealized" and i in active) else axis_sizes[grouped[i]]
        for i in range(k)
    ]

    def feasible(vec: Sequence[int]) -> bool:
        v = [float(x) for x in vec]
        return max(f(v) for f in col_fns) <= memory + 1e-6

    def candidate_key(vec: Sequence[int]) -> tuple[float, int, tuple[int, ...]]:
        return (h_fn([float(x) for x in vec]), -sum(vec), tuple(-x for x in vec))

    ranges: list[list[int]] = []
    for i in active:
        c, a = best_x[i], grouped[i]
        lo = max(1, math.floor(c) - 2)
        hi_i = min(int(axis_sizes[a]), caps[i], math.ceil(c) + 2)
        vals = set(range(lo, hi_i + 1))
        vals.add(1)
        if int(axis_sizes[a]) <= caps[i]:
            vals.add(int(axis_sizes[a]))
        ranges.append(sorted(vals))
    if math.prod(len(r) for r in ranges) > 40000:
        ranges = []
        for i in active:
            c, a = best_x[i], grouped[i]
            vals = {1, max(1, math.floor(c)), min(caps[i], max(1, math.ceil(c)))}
            if int(axis_sizes[a]) <= caps[i]:
                vals.add(int(axis_sizes[a]))
            ranges.append(sorted(vals))

    best = tuple(int(x) for x in embed([1.0] * len(active)))
    best_key = candidate_key(best)
    for sub in itertools.product(*ranges):
        vec = tuple(int(x) for x in embed(sub))
        if not feasible(vec):
            continue
        key = candidate_key(vec)
        if key < best_key:
            best, best_key = vec, key

    # Local polish: march each active axis up or down while it helps.
    improved = True
    while improved:
        improved = False
        for i in active:
            for step in (1, -1):
                trial = list(best)
                trial[i] += step
                if not (1 <= trial[i] <= min(int(axis_sizes[grouped[i]]), caps[i])):
                    continue
                tvec = tuple(trial)
                if not feasible(tvec):
                    continue
                key = candidate_key(tvec)
                if key < best_key:
                    best, best_key = tvec, key
                    improved = True

    # Free axes do not change the volume; raise each to the largest feasible
    # size in axis order (ties prefer larger groups).
    final = list(best)
    for i in free:
        lo_v, hi_v = 1, int(axis_sizes[grouped[i]])
        while lo_v < hi_v:
            mid = (lo_v + hi_v + 1) // 2
            trial = list(final)
            trial[i] = mid
            if feasible(trial):
                lo_v = mid
            else:
                hi_v = mid - 1
        final[i] = lo_v
    best = tuple(final)
    groups = dict(zip(grouped, best))

    h_val = float(h_fn([float(x) for x in best]))
    foot = max(f([float(x) for x in best]) for f in col_fns)
    return GroupPlan(
        diagram=d.name,
        level=level,
        budget=memory,
        mode=mode,
        groups=groups,
        streamed=tuple(streamed),
        transfers=h_val,
        footprint=foot,
        continuous=continuous,
        transfers_relaxed=h_fn(best_x),
    )


def budget_range(
    d: dg.Diagram, level: str = "l1", mode: str = "exact"
) -> tuple[float, float]:
    """The (minimum, saturation) footprint window of the power-law regime.

    Below ``minimum`` even unit groups do not fit; at or above
    ``saturation`` every group that affects the volume reaches its full
    axis size and the transfer volume stops scaling with the budget.
    Model extraction should sample budgets strictly inside this window.
    """
    base = dg.strip_relabels(d)
    axis_sizes = base.axis_sizes()
    work, grouped, streamed = _classify_axes(base)
    stream_sub = {
        _plan_symbols("s", a): (sympy.Integer(1) if mode == "exact" else sympy.Integer(0))
        for a in streamed
    }
    h_expr = sympy.expand(resources.total_transfer(work, mode="idealized")).subs(stream_sub)
    cols = [c.subs(stream_sub) for c in resources.memory_columns(work, level)]
    ones = {_plan_symbols("g", a): sympy.Integer(1) for a in grouped}
    # Groups absent from the volume only consume footprint; saturation is
    # reached once the volume-affecting groups are at full size.
    full = {
        s: (sympy.Integer(axis_sizes[a]) if s in h_expr.free_symbols else sympy.Integer(1))
        for a in grouped
        for s in (_plan_symbols("g", a),)
    }
    lo = max((float(c.subs(ones)) for c in cols), default=0.0)
    hi = max((float(c.subs(full)) for c in cols), default=0.0)
    return lo, hi


def sample_transfers(
    d: dg.Diagram,
    budgets: Iterable[float],
    level: str = "l1",
    mode: str = "exact",
    relaxed: bool = False,
) -> list[tuple[float, float]]:
    """Optimized (budget, transfers) pairs over a grid of memory budgets.

    With ``relaxed`` the pre-rounding transfer volume is reported, which
    follows the smooth power law and is the right input for model fits;
    otherwise the integer plan's volume is used.
    """
    out: list[tuple[float, float]] = []
    for m in budgets:
        plan = optimize_groups(d, m, level=level, mode=mode)
        out.append((float(m), plan.transfers_relaxed if relaxed else plan.transfers))
    return out


def sample_budget_grid(
    d: dg.Diagram,
    points: int = 9,
    level: str = "l1",
    mode: str = "exact",
) -> list[float]:
    """Geometric budget grid inside the power-law window of ``d``."""
    lo, hi = budget_range(d, level, mode)
    lo = max(lo * 2.0, 2.0)
    hi = hi / 2.0
    if not (hi > lo):
        raise OptimizeError(
            f"no power-law window for {d.name!r} at {level!r}: "
            f"minimum {lo} does not sit below saturation {hi}"
        )
    ratio = (hi / lo) ** (1.0 / (points - 1))
    return [lo * ratio**i for i in range(points)]


# ---------------------------------------------------------------------------
# power-law extraction


def _nnls_fit(
    ms: np.ndarray, hs: np.ndarray, betas: Sequence[Fraction]
) -> tuple[np.ndarray, float]:
    """Relative-error nonnegative fit of H ~ sum alpha_k M**-beta_k."""
    design = np.stack([ms ** float(-b) for b in betas], axis=1)
    weights = 1.0 / hs
    alphas, _ = scipy.optimize.nnls(design * weights[:, None], np.ones_like(hs))
    pred = design @ alphas
    resid = float(np.max(np.abs(pred - hs) / hs)) if len(hs) else 0.0
    return alphas, resid


def extract_terms(
    samples: Sequence[tuple[float, float]],
    output_size: SizeLike | None = None,
    exponents: Sequence[Fraction] = SNAP_EXPONENTS,
    tolerance: float = 0.02,
    name: str = "fit",
) -> PerfModel:
    """Fit a sparse power-law model to (budget, transfers) samples.

    Exponents are restricted to the snap set (rationals with denominator
    at most 4); coefficients come from a relative-error nonnegative least
    squares over that dictionary, then terms are greedily pruned while the
    remaining fit stays within half the tolerance.  Raises ``FitError``
    when the final model misses any sample by more than ``tolerance``.
    """
    pts = sorted((float(m), float(h)) for m, h in samples)
    if len(pts) < 2:
        raise FitError(math.inf, tolerance)
    ms = np.array([p[0] for p in pts])
    hs = np.array([p[1] for p in pts])
    if np.any(ms <= 0) or np.any(hs <= 0):
        raise OptimizeError("samples must have positive budgets and transfers")
    if len(np.unique(ms)) != len(ms):
        raise OptimizeError("samples must have distinct budgets")

    betas = [Fraction(b) for b in exponents]
    alphas, resid = _nnls_fit(ms, hs, betas)
    support = [i for i, a in enumerate(alphas) if a > 0]

    # Greedy pruning: drop the weakest term while the fit stays tight.
    inner = tolerance / 2
    improved = True
    while improved and len(support) > 1:
        improved = False
        order = sorted(
            support, key=lambda i: alphas[i] * float(np.max(ms ** float(-betas[i])))
        )
        for i in order:
            trial = [j for j in support if j != i]
            t_alphas, t_resid = _nnls_fit(ms, hs, [betas[j] for j in trial])
            if t_resid <= inner:
                support = trial
                full = np.zeros(len(betas))
                full[trial] = t_alphas
                alphas, resid = full, t_resid
                improved = True
                break

    if resid > tolerance:
        raise FitError(resid, tolerance)
    terms = tuple(
        (sympy.Float(alphas[i]), betas[i]) for i in support if alphas[i] > 0
    )
    terms = tuple(sorted(terms, key=lambda t: t[1]))
    return PerfModel(name=name, terms=terms, output_size=output_size)
