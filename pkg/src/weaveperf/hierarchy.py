"""Multi-level transfer-cost models over hardware hierarchies.

A hardware catalog describes an ordered chain of memory levels joined by
pipes with byte bandwidths.  Each level below the top contributes
``hinv * H(model, M_level)`` to the total weighted transfer cost, where
``hinv`` is seconds (or joules) per byte and ``H`` is the level's optimal
transfer volume.  Cache and cross-transfer levels reshape their effective
weight and memory before that sum:

* a cache level stages its child level's output, so it is limited by the
  total child memory ``n_max_child * M_child`` rather than its own size,
* a cross-transfer level lets siblings exchange data directly; the slow
  parent path is charged only for ``H`` at the pooled sibling memory and
  the remainder moves at the sibling bandwidth.

Both rewrites assume the working set at the level is dominated by the
algorithm's output, so they must be explicitly enabled per call.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .optimizer import PerfModel

LEVEL_ROLES = ("top", "plain", "cache", "cross-transfer")

CATALOG_DIR_ENV = "WEAVEPERF_CATALOG_DIR"

#: Levels whose memory holds fewer than this many output rows get a note
#: about tile-fitting error in cost breakdowns.
FITTING_NOTE_FACTOR = 64


class HierarchyError(ValueError):
    """Invalid hardware catalog or level configuration."""


class CrossTransferWarning(UserWarning):
    """Sibling transfers are slower than the direct parent path."""


@dataclass(frozen=True)
class Level:
    """One memory level: capacity in bytes (None = unlimited), the maximum
    number of nodes of this level per parent node, and its role."""

    id: str
    bytes: float | None = None
    n_max: int = 1
    role: str = "plain"

    def __post_init__(self) -> None:
        if self.role not in LEVEL_ROLES:
            raise HierarchyError(
                f"level {self.id!r} role must be one of {LEVEL_ROLES}, got {self.role!r}"
            )
        if self.bytes is not None and self.bytes <= 0:
            raise HierarchyError(f"level {self.id!r} must have positive bytes")
        if self.n_max < 1:
            raise HierarchyError(f"level {self.id!r} n_max must be >= 1")


@dataclass(frozen=True)
class Pipe:
    """Parent-to-child link with a byte bandwidth."""

    src: str
    dst: str
    bytes_per_s: float

    def __post_init__(self) -> None:
        if self.bytes_per_s <= 0:
            raise HierarchyError(f"pipe {self.src}->{self.dst} needs positive bandwidth")

    @property
    def hinv(self) -> float:
        """Seconds per byte."""
        return 1.0 / self.bytes_per_s


@dataclass(frozen=True)
class CrossLink:
    """Sibling-to-sibling bandwidth of a cross-transfer level, by the
    number of linked siblings."""

    level: str
    bytes_per_s_by_n: dict[int, float]

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "bytes_per_s_by_n",
            {int(k): float(v) for k, v in self.bytes_per_s_by_n.items()},
        )
        for n, bw in self.bytes_per_s_by_n.items():
            if n < 2 or bw <= 0:
                raise HierarchyError(
                    f"cross link at {self.level!r}: need n >= 2 and positive "
                    f"bandwidth, got n={n} bw={bw}"
                )


@dataclass(frozen=True)
class Hierarchy:
    """An ordered memory hierarchy (top first) with pipes and pipelines."""

    name: str
    levels: tuple[Level, ...]
    pipes: tuple[Pipe, ...]
    cross: tuple[CrossLink, ...] = ()
    pipelines: Mapping[str, Any] = field(default_factory=dict)
    clock_hz: float | None = None
    n_sm: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(self.levels))
        object.__setattr__(self, "pipes", tuple(self.pipes))
        object.__setattr__(self, "cross", tuple(self.cross))
        object.__setattr__(self, "pipelines", dict(self.pipelines))
        if not self.levels:
            raise HierarchyError("hierarchy needs at least one level")
        ids = [l.id for l in self.levels]
        if len(set(ids)) != len(ids):
            raise HierarchyError(f"duplicate level ids: {ids}")
        top = self.levels[0]
        if top.bytes is not None:
            raise HierarchyError(
                f"top level {top.id!r} must have unlimited memory (bytes null)"
            )
        by_dst: dict[str, Pipe] = {}
        for p in self.pipes:
            if p.src not in ids or p.dst not in ids:
                raise HierarchyError(f"pipe {p.src}->{p.dst} references unknown level")
            if p.dst in by_dst:
                raise HierarchyError(f"level {p.dst!r} has more than one parent pipe")
            by_dst[p.dst] = p
        for i, lvl in enumerate(self.levels[1:], start=1):
            p = by_dst.get(lvl.id)
            if p is None:
                raise HierarchyError(f"level {lvl.id!r} has no parent pipe")
            if p.src != self.levels[i - 1].id:
                raise HierarchyError(
                    f"pipe into {lvl.id!r} must come from the level above "
                    f"({self.levels[i - 1].id!r}), got {p.src!r}"
                )
        for c in self.cross:
            lvl = self.level(c.level)
            if lvl.role != "cross-transfer":
                raise HierarchyError(
                    f"cross link on {c.level!r} requires role cross-transfer"
                )
        for lvl in self.levels[1:]:
            if lvl.role == "top":
                raise HierarchyError(
                    f"only the first level may have role top, not {lvl.id!r}"
                )
        for i, lvl in enumerate(self.levels):
            if lvl.role in ("cache", "cross-transfer") and i + 1 >= len(self.levels):
                raise HierarchyError(
                    f"{lvl.role} level {lvl.id!r} needs a child level below it"
                )
            if lvl.role == "cross-transfer" and self.cross_link(lvl.id) is None:
                raise HierarchyError(
                    f"cross-transfer level {lvl.id!r} has no cross link entry"
                )

    def level(self, id: str) -> Level:
        for l in self.levels:
            if l.id == id:
                return l
        raise HierarchyError(f"unknown level {id!r} in {self.name!r}")

    def parent_pipe(self, id: str) -> Pipe:
        for p in self.pipes:
            if p.dst == id:
                return p
        raise HierarchyError(f"level {id!r} has no parent pipe")

    def cross_link(self, id: str) -> CrossLink | None:
        for c in self.cross:
            if c.level == id:
                return c
        return None

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "levels": [
                {"id": l.id, "bytes": l.bytes, "n_max": l.n_max, "role": l.role}
                for l in self.levels
            ],
            "pipes": [
                {"from": p.src, "to": p.dst, "bytes_per_s": p.bytes_per_s}
                for p in self.pipes
            ],
            "cross": [
                {
                    "level": c.level,
                    "bytes_per_s_by_n": {str(n): bw for n, bw in sorted(c.bytes_per_s_by_n.items())},
                }
                for c in self.cross
            ],
            "pipelines": dict(self.pipelines),
            "clock_hz": self.clock_hz,
            "n_sm": self.n_sm,
        }

    @staticmethod
    def from_json(obj: Mapping[str, Any], name: str | None = None) -> "Hierarchy":
        return Hierarchy(
            name=name or obj.get("name", "catalog"),
            levels=tuple(
                Level(
                    id=l["id"],
                    bytes=l.get("bytes"),
                    n_max=int(l.get("n_max", 1)),
                    role=l.get("role", "plain"),
                )
                for l in obj["levels"]
            ),
            pipes=tuple(
                Pipe(src=p["from"], dst=p["to"], bytes_per_s=float(p["bytes_per_s"]))
                for p in obj.get("pipes", ())
            ),
            cross=tuple(
                CrossLink(level=c["level"], bytes_per_s_by_n=c["bytes_per_s_by_n"])
                for c in obj.get("cross", ())
            ),
            pipelines=obj.get("pipelines", {}),
            clock_hz=obj.get("clock_hz"),
            n_sm=obj.get("n_sm"),
        )


# ---------------------------------------------------------------------------
# catalog files


def _data_dir() -> Path:
    return Path(__file__).resolve().parent / "data"


def catalog_search_dirs() -> list[Path]:
    """Catalog lookup path: WEAVEPERF_CATALOG_DIR entries, then shipped data."""
    dirs: list[Path] = []
    env = os.environ.get(CATALOG_DIR_ENV)
    if env:
        dirs.extend(Path(p) for p in env.split(os.pathsep) if p)
    dirs.append(_data_dir())
    return dirs


def list_catalogs() -> list[str]:
    names: set[str] = set()
    for d in catalog_search_dirs():
        if d.is_dir():
            names.update(p.stem for p in d.glob("*.json"))
    return sorted(names)


def load_catalog(name: str) -> Hierarchy:
    """Load a catalog by name (searched) or by explicit path."""
    p = Path(name)
    if p.suffix == ".json" and p.exists():
        return Hierarchy.from_json(json.loads(p.read_text()), name=p.stem)
    for d in catalog_search_dirs():
        cand = d / f"{name}.json"
        if cand.exists():
            return Hierarchy.from_json(json.loads(cand.read_text()), name=name)
    raise HierarchyError(
        f"no catalog named {name!r}; available: {', '.join(list_catalogs()) or 'none'}"
    )


# ---------------------------------------------------------------------------
# effective levels


@dataclass(frozen=True)
class EffectiveLevel:
    """A level after the cache/cross rewrites: weight in seconds-per-byte
    and effective memory in bytes (inf for the top)."""

    id: str
    hinv: float
    memory: float
    role: str


def effective_levels(
    h: Hierarchy,
    output_restricted: bool = False,
    allow_distributed_top: bool = False,
) -> list[EffectiveLevel]:
    """Rewrite catalog levels into (weight, effective memory) pairs.

    Plain levels keep their parent-pipe weight and own capacity.  Cache
    and cross-transfer rewrites require ``output_restricted`` because they
    assume the level's working set is the algorithm's output.  A top-level
    cross-transfer level models a distributed system whose data is already
    spread across children (negative weight); it must be enabled with
    ``allow_distributed_top``.
    """
    out: list[EffectiveLevel] = []
    override: dict[str, float] = {}
    for i, lvl in enumerate(h.levels):
        if i == 0 and lvl.role == "cross-transfer":
            if not allow_distributed_top:
                raise HierarchyError(
                    f"top level {lvl.id!r} is a cross-transfer level; pass "
                    f"allow_distributed_top=True to model pre-distributed data"
                )
            if not output_restricted:
                raise HierarchyError(
                    f"cross-transfer rewrite of {lvl.id!r} needs output_restricted=True"
                )
            child = h.levels[i + 1]
            if child.bytes is None:
                raise HierarchyError(f"child {child.id!r} of {lvl.id!r} needs finite bytes")
            if child.n_max == 1:
                out.append(EffectiveLevel(lvl.id, 0.0, math.inf, "top"))
                continue
            hinv_xc = _cross_hinv(h, lvl, child)
            out.append(
                EffectiveLevel(lvl.id, -hinv_xc, child.n_max * child.bytes, lvl.role)
            )
            override[child.id] = hinv_xc
            continue
        if i == 0:
            out.append(EffectiveLevel(lvl.id, 0.0, math.inf, "top"))
            continue
        hinv = override.pop(lvl.id, None)
        if hinv is None:
            hinv = h.parent_pipe(lvl.id).hinv
        if lvl.role == "plain":
            if lvl.bytes is None:
                raise HierarchyError(f"non-top level {lvl.id!r} needs finite bytes")
            out.append(EffectiveLevel(lvl.id, hinv, lvl.bytes, "plain"))
            continue
        child = h.levels[i + 1]
        if child.bytes is None:
            raise HierarchyError(f"child {child.id!r} of {lvl.id!r} needs finite bytes")
        if not output_restricted:
            raise HierarchyError(
                f"{lvl.role} rewrite of {lvl.id!r} assumes an output-restricted "
                f"algorithm; pass output_restricted=True to enable it"
            )
        if lvl.role == "cache":
            out.append(
                EffectiveLevel(lvl.id, hinv, child.n_max * child.bytes, lvl.role)
            )
            continue
        # cross-transfer: charge the parent path at pooled sibling memory,
        # move the remainder at the sibling bandwidth.  The parent path is
        # the pipe the child would be charged at without clustering.
        n = child.n_max
        if n == 1:
            continue  # a single child has no siblings; level drops out
        hinv = h.parent_pipe(child.id).hinv
        hinv_xc = _cross_hinv(h, lvl, child)
        if hinv_xc > hinv:
            warnings.warn(
                f"cross-transfer level {lvl.id!r}: sibling path "
                f"({hinv_xc:.3e} s/B) is slower than the direct path "
                f"({hinv:.3e} s/B); its effective weight is negative",
                CrossTransferWarning,
                stacklevel=2,
            )
        out.append(EffectiveLevel(lvl.id, hinv - hinv_xc, n * child.bytes, lvl.role))
        override[child.id] = hinv_xc
    return out


def _cross_hinv(h: Hierarchy, lvl: Level, child: Level) -> float:
    link = h.cross_link(lvl.id)
    if link is None:
        raise HierarchyError(f"cross-transfer level {lvl.id!r} has no cross link")
    n = child.n_max
    if n not in link.bytes_per_s_by_n:
        raise HierarchyError(
            f"cross link at {lvl.id!r} has no bandwidth for n={n}; "
            f"available: {sorted(link.bytes_per_s_by_n)}"
        )
    return 1.0 / link.bytes_per_s_by_n[n]


# ---------------------------------------------------------------------------
# weighted cost evaluation


def _term_values(
    model: PerfModel, bindings: Mapping[str, int] | None
) -> list[tuple[float, float]]:
    from ._symbols import evaluate

    out: list[tuple[float, float]] = []
    for alpha, beta in model.terms:
        out.append((float(evaluate(alpha, bindings or {})), float(beta)))
    return out


def quantized_cost(
    model: PerfModel,
    h: Hierarchy,
    quant: float = 1.0,
    bindings: Mapping[str, int] | None = None,
    output_restricted: bool = False,
    allow_distributed_top: bool = False,
) -> float:
    """Total weighted transfer cost with ``quant`` bytes per value.

    Each term alpha * M**-beta contributes
    ``alpha * q**(1+beta) * sum_l hinv_l * M_l**-beta`` with byte-denominated
    weights and memories: fewer bytes per value shrink both the moved bytes
    and the effective per-value memory, so the gain is superlinear in q.
    """
    if quant <= 0:
        raise HierarchyError(f"quant must be positive bytes per value, got {quant}")
    levels = effective_levels(
        h,
        output_restricted=output_restricted,
        allow_distributed_top=allow_distributed_top,
    )
    total = 0.0
    for alpha, beta in _term_values(model, bindings):
        s = 0.0
        for lvl in levels:
            if lvl.hinv == 0.0:
                continue
            s += lvl.hinv * lvl.memory ** (-beta)
        total += alpha * quant ** (1.0 + beta) * s
    return total


def total_cost(
    model: PerfModel,
    h: Hierarchy,
    quant: float = 1.0,
    bindings: Mapping[str, int] | None = None,
    output_restricted: bool = False,
    allow_distributed_top: bool = False,
) -> float:
    """Weighted transfer cost; equals ``quantized_cost`` at the same q."""
    return quantized_cost(
        model,
        h,
        quant=quant,
        bindings=bindings,
        output_restricted=output_restricted,
        allow_distributed_top=allow_distributed_top,
    )


def cost_breakdown(
    model: PerfModel,
    h: Hierarchy,
    quant: float = 1.0,
    bindings: Mapping[str, int] | None = None,
    output_restricted: bool = False,
    allow_distributed_top: bool = False,
) -> dict[str, Any]:
    """Per-level cost rows plus advisory notes, as plain JSON data."""
    terms = _term_values(model, bindings)
    levels = effective_levels(
        h,
        output_restricted=output_restricted,
        allow_distributed_top=allow_distributed_top,
    )
    rows: list[dict[str, Any]] = []
    notes: list[str] = []
    y = None
    if model.output_size is not None:
        try:
            from ._symbols import evaluate

            y = float(evaluate(model.output_size, bindings or {}))
        except Exception:
            y = None
    total = 0.0
    for lvl in levels:
        m_values = math.inf if math.isinf(lvl.memory) else lvl.memory / quant
        transfers = sum(a * m_values ** (-b) for a, b in terms) if lvl.hinv else 0.0
        seconds = lvl.hinv * transfers * quant
        total += seconds
        rows.append(
            {
                "level": lvl.id,
                "role": lvl.role,
                "hinv_s_per_byte": lvl.hinv,
                "memory_bytes": None if math.isinf(lvl.memory) else lvl.memory,
                "memory_values": None if math.isinf(m_values) else m_values,
                "transfers_values": transfers,
                "seconds": seconds,
            }
        )
        if (
            y is not None
            and lvl.hinv != 0.0
            and not math.isinf(m_values)
            and m_values < FITTING_NOTE_FACTOR * y
        ):
            notes.append(
                f"level {lvl.id}: memory holds fewer than {FITTING_NOTE_FACTOR} "
                f"outputs ({m_values:.0f} values vs output {y:.0f}); tile-fitting "
                f"error is not negligible at this size"
            )
    return {
        "model": model.name,
        "catalog": h.name,
        "quant": quant,
        "levels": rows,
        "total_seconds": total,
        "notes": notes,
    }


# ---------------------------------------------------------------------------
# cluster trade-off


@dataclass(frozen=True)
class ClusterRow:
    n: int
    hinv_cross: float | None
    delta_hinv: float
    delta_cost: float


@dataclass(frozen=True)
class ClusterTable:
    rows: tuple[ClusterRow, ...]
    best_n: int

    def to_json(self) -> dict[str, Any]:
        return {
            "rows": [
                {
                    "n": r.n,
                    "hinv_cross": r.hinv_cross,
                    "delta_hinv": r.delta_hinv,
                    "delta_cost": r.delta_cost,
                }
                for r in self.rows
            ],
            "best_n": self.best_n,
        }


def cluster_tradeoff(
    model: PerfModel,
    memory_c: float,
    hinv_direct: float,
    hinv_cross_by_n: Mapping[int, float],
    quant: float = 1.0,
    bindings: Mapping[str, int] | None = None,
) -> ClusterTable:
    """Savings from sibling cross-transfers as a function of cluster size.

    For each N the saving is
    ``(hinv_direct - hinv_cross(N)) * sum_t alpha_t q**(1+beta) M_c**-beta (1 - N**-beta)``:
    larger clusters pool more memory (bigger discount) but usually at a
    lower sibling bandwidth.  N=1 means no clustering and saves nothing.
    The row with the largest saving is flagged as ``best_n``.
    """
    if memory_c <= 0:
        raise HierarchyError(f"child memory must be positive, got {memory_c}")
    terms = _term_values(model, bindings)
    rows: list[ClusterRow] = []
    for n in sorted({1} | {int(k) for k in hinv_cross_by_n}):
        if n == 1:
            rows.append(ClusterRow(1, None, 0.0, 0.0))
            continue
        hinv_x = float(hinv_cross_by_n[n])
        delta_hinv = hinv_direct - hinv_x
        saving = delta_hinv * sum(
            a * quant ** (1.0 + b) * memory_c ** (-b) * (1.0 - float(n) ** (-b))
            for a, b in terms
        )
        rows.append(ClusterRow(n, hinv_x, delta_hinv, saving))
    best = max(rows, key=lambda r: (r.delta_cost, -r.n))
    return ClusterTable(tuple(rows), best.n)


# ---------------------------------------------------------------------------
# caching feasibility


@dataclass(frozen=True)
class NumberRestrictionReport:
    ratio: float
    limit: int
    passed: bool

    def to_json(self) -> dict[str, Any]:
        return {"ratio": self.ratio, "limit": self.limit, "passed": self.passed}


def number_restriction_check(
    h: Hierarchy,
    lower: str,
    upper: str,
    groups_lower: Mapping[str, int],
    groups_upper: Mapping[str, int],
) -> NumberRestrictionReport:
    """Check that the lower level can hold the upper level's tiling.

    Each upper-level tile of group sizes g_upper spans
    ``prod(g_upper)/prod(g_lower)`` lower-level tiles, all of which must be
    resident at once, so the ratio may not exceed the lower level's child
    count per parent.
    """
    if set(groups_lower) != set(groups_upper):
        raise HierarchyError(
            f"group maps must cover the same axes; got {sorted(groups_lower)} "
            f"vs {sorted(groups_upper)}"
        )
    for axes in (groups_lower, groups_upper):
        for a, g in axes.items():
            if g < 1:
                raise HierarchyError(f"group size for {a!r} must be >= 1, got {g}")
    lo = h.level(lower)
    h.level(upper)
    ratio = math.prod(groups_upper.values()) / math.prod(groups_lower.values())
    return NumberRestrictionReport(ratio, lo.n_max, ratio <= lo.n_max + 1e-9)
