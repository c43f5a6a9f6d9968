from __future__ import annotations

import pytest

from weaveperf import hierarchy as hw
from weaveperf import pseudocode as pcode
from weaveperf import schedule as sched


@pytest.fixture(scope="session")
def h100() -> hw.Hierarchy:
    return hw.load_catalog("h100_sxm5_like")


@pytest.fixture(scope="session")
def h800() -> hw.Hierarchy:
    return hw.load_catalog("h800_like")


@pytest.fixture(scope="session")
def pipecat(h100: hw.Hierarchy) -> sched.PipelineCatalog:
    return sched.PipelineCatalog.from_hierarchy(h100)


@pytest.fixture(scope="session")
def plan_default(h100: hw.Hierarchy) -> pcode.PseudocodeDiagram:
    return pcode.attention_plan(catalog=h100)


@pytest.fixture(scope="session")
def rows_default(plan_default: pcode.PseudocodeDiagram):
    return pcode.variable_table(plan_default)


@pytest.fixture(scope="session")
def plan_fp16(h100: hw.Hierarchy) -> pcode.PseudocodeDiagram:
    return pcode.attention_plan(dict(sched.FP16_LARGE_TILE_CONFIG), catalog=h100)


@pytest.fixture(scope="session")
def plan_fp8(h100: hw.Hierarchy) -> pcode.PseudocodeDiagram:
    return pcode.attention_plan(dict(sched.FP8_LARGE_TILE_CONFIG), catalog=h100)
