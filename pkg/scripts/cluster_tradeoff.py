#!/usr/bin/env python3
"""Evaluate the cluster cross-transfer trade-off on a catalog with a link.

Pooling N sibling cores over a cross-transfer link multiplies the effective
memory by N but adds a second, slower hop for the shared data. The script
prints the per-cluster-size change in weighted transfer cost for the
attention model and reports which cluster size the catalog favors.
"""

from __future__ import annotations

import argparse

from weaveperf import hierarchy as hw
from weaveperf import optimizer as opt


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--catalog", default="h800_like")
    ap.add_argument("--sizes", default="q=384,x=1024,d=128")
    ap.add_argument("--quant", type=float, default=1.0)
    args = ap.parse_args()

    cat = hw.load_catalog(args.catalog)
    idx = next(
        (i for i, lv in enumerate(cat.levels) if lv.role == "cross-transfer"),
        None,
    )
    if idx is None or idx + 1 >= len(cat.levels):
        raise SystemExit(f"catalog {cat.name!r} has no cross-transfer level")
    child = cat.levels[idx + 1]
    link = cat.cross_link(cat.levels[idx].id)

    sizes = {
        k: int(v) for k, v in (p.split("=") for p in args.sizes.split(","))
    }
    model = opt.closed_form("attention", sizes)

    table = hw.cluster_tradeoff(
        model,
        memory_c=float(child.bytes),
        hinv_direct=cat.parent_pipe(child.id).hinv,
        hinv_cross_by_n={n: 1.0 / bw for n, bw in link.bytes_per_s_by_n.items()},
        quant=args.quant,
    )
    print(f"== cluster trade-off on {cat.name} (attention {args.sizes})")
    print("   n   hinv_cross (s/B)   delta_hinv (s/B)   saving (s)")
    for r in table.rows:
        hx = f"{r.hinv_cross:.3e}" if r.hinv_cross is not None else "   --    "
        print(
            f"  {r.n:2d}   {hx:>15s}   {r.delta_hinv:+.3e}   {r.delta_cost:+.6e}"
        )
    print(f"   best cluster size: {table.best_n}")


if __name__ == "__main__":
    main()
