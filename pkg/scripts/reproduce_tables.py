#!/usr/bin/env python3
"""Print the attention kernel's planning tables for a hardware catalog.

Covers the full chain the `plan` command exposes: the variable-by-variable
memory inventory, per-level budgets and warpgroup bounds for a range of
co-resident warpgroup counts, per-thread clock costs with the tensor-core
lower bound, the bandwidth threshold and ideal throughput, and the
utilization predicted by each overlap strategy.
"""

from __future__ import annotations

import argparse

from weaveperf import hierarchy as hw
from weaveperf import pseudocode as pcm
from weaveperf import schedule as sc


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--catalog", default="h100_sxm5_like")
    ap.add_argument(
        "--preset",
        default="defaults",
        choices=["defaults", "fp16-large-tile", "fp8-large-tile"],
    )
    ap.add_argument("--sfu-overhead", type=float, default=0.66)
    args = ap.parse_args()

    cat = hw.load_catalog(args.catalog)
    config = {
        "defaults": {},
        "fp16-large-tile": dict(sc.FP16_LARGE_TILE_CONFIG),
        "fp8-large-tile": dict(sc.FP8_LARGE_TILE_CONFIG),
    }[args.preset]
    plan = pcm.attention_plan(config, catalog=cat)
    rows = pcm.variable_table(plan)

    print(f"== memory inventory ({args.preset} on {cat.name})")
    table = pcm.config_table(rows, cat)
    print(table.to_text())
    print()

    print("== warpgroup budgets by co-resident count")
    for n in (1, 2, 3, 4):
        t = pcm.config_table(rows, cat, n=n)
        marks = " ".join(t.notes) if t.notes else "fits"
        for b in t.budgets:
            print(
                f"  n={n} {b.level:9s} m_wg={b.m_wg:6.0f}B "
                f"n_max={b.n_max:5.2f} excess/wg={b.excess_wg:9.2f}B "
                f"excess/thread={b.excess_thread:6.2f}B"
            )
        print(f"  n={n} -> {marks}")
    print()

    pipes = sc.PipelineCatalog.from_hierarchy(cat)
    costs = sc.column_costs(plan, pipes)
    print("== per-thread clock costs")
    for c in costs:
        print(f"  {c.column:12s} {c.pipeline:12s} {c.clk_per_thread:7.4f} clk")
    print(f"  tensor lower bound: {sc.tensor_lower_bound(costs):g} clk")
    print(f"  bandwidth threshold: {sc.bandwidth_threshold(plan, cat):.1f}")
    print(f"  ideal throughput: {sc.ideal_throughput(costs, pipes):.4g} FLOP/s")
    print()

    print(f"== overlap strategies (sfu overhead {args.sfu_overhead})")
    for strategy in sc.STRATEGIES:
        try:
            s = sc.build_schedule(
                plan, pipes, strategy, overheads={"sfu": args.sfu_overhead}
            )
        except sc.ScheduleError as err:
            print(f"  {strategy:18s} unavailable: {err}")
            continue
        u = sc.utilization(s)
        idle = ", ".join(f"{k} {v:.1%}" for k, v in sorted(u.idle.items()))
        print(
            f"  {strategy:18s} utilization {u.fraction:6.1%} "
            f"(limited by {u.limiting}; idle: {idle})"
        )


if __name__ == "__main__":
    main()
