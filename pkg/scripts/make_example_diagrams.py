"""Regenerate the shipped example diagrams in src/weaveperf/data/diagrams/.

Sizes are kept modest so `weaveperf verify` runs in seconds while the
budgets still leave a clear power-law window for `weaveperf optimize`.
"""

from __future__ import annotations

import json
from pathlib import Path

from weaveperf import diagram as dg
from weaveperf import library

OUT = Path(__file__).resolve().parents[1] / "src" / "weaveperf" / "data" / "diagrams"

EXAMPLES = {
    "matmul": library.canonical_matmul(64, 64, 64),
    "attention": library.canonical_attention(32, 64, 16),
    "mha": library.canonical_mha(4, 16, 32, 8),
    "gqa": library.canonical_gqa(2, 16, 32, 8),
}


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    for name, d in EXAMPLES.items():
        obj = dg.diagram_to_json(d)
        back = dg.diagram_from_json(obj)
        assert dg.diagram_to_json(back) == obj, f"round trip failed for {name}"
        path = OUT / f"{name}.json"
        path.write_text(json.dumps(obj, indent=2) + "\n")
        print(f"wrote {path} ({path.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
