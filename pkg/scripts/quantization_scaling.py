#!/usr/bin/env python3
"""Show how the weighted transfer cost scales with bytes per value.

Halving the bytes per value shrinks both the moved bytes and the effective
per-value memory at every level, so each model term alpha * M^-beta gains a
factor of 2^(1+beta): 4x for the memory-bound attention term (beta = 1),
about 2.83x for the large-matmul term (beta = 1/2). The script evaluates
the shipped closed-form models across a range of quantizations and prints
the per-halving gain alongside those asymptotes.
"""

from __future__ import annotations

import argparse

from weaveperf import hierarchy as hw
from weaveperf import optimizer as opt


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--catalog", default="h100_sxm5_like")
    args = ap.parse_args()

    cat = hw.load_catalog(args.catalog)
    models = {
        "attention (q=384, x=1024, d=128)": opt.closed_form(
            "attention", {"q": 384, "x": 1024, "d": 128}
        ),
        "matmul (4096^3)": opt.closed_form(
            "matmul", {"a": 4096, "b": 4096, "c": 4096}
        ),
    }
    quants = [8.0, 4.0, 2.0, 1.0]

    for label, model in models.items():
        print(f"== {label}")
        dominant = max(model.terms, key=lambda t: t[1])
        print(
            "   dominant term beta = "
            f"{dominant[1]} -> per-halving asymptote {2.0 ** (1 + float(dominant[1])):.3f}x"
        )
        prev = None
        for q in quants:
            cost = hw.quantized_cost(model, cat, quant=q, output_restricted=True)
            gain = f"{prev / cost:6.3f}x vs {2 * q:g}B" if prev is not None else " " * 13
            print(f"   q={q:3g} B/value  cost {cost:.6e} s  {gain}")
            prev = cost
        only_dominant = opt.PerfModel("dominant", (dominant,), model.output_size)
        ratio = hw.quantized_cost(
            only_dominant, cat, quant=4.0, output_restricted=True
        ) / hw.quantized_cost(only_dominant, cat, quant=2.0, output_restricted=True)
        print(f"   dominant-term-only 4B -> 2B ratio: {ratio:.6f}")
        print()


if __name__ == "__main__":
    main()
