"""Dataflow-diagram analysis of GPU kernels.

Build hierarchy-annotated diagrams (:mod:`weaveperf.diagram`,
:mod:`weaveperf.library`), measure their transfer/memory costs
(:mod:`weaveperf.resources`) against a numeric oracle
(:mod:`weaveperf.oracle`), certify streaming rewrites
(:mod:`weaveperf.streaming`), optimise tilings and fit power-law models
(:mod:`weaveperf.optimizer`), price them on hardware catalogs
(:mod:`weaveperf.hierarchy`), lower them to register-level loop plans
(:mod:`weaveperf.pseudocode`), and schedule warpgroup overlap
(:mod:`weaveperf.schedule`).  The command line and HTTP service in
:mod:`weaveperf.cli` / :mod:`weaveperf.service` expose the same engine.
"""

from __future__ import annotations

from .diagram import (
    ArrayShape,
    Axis,
    DataColumn,
    Diagram,
    DiagramError,
    OpNode,
    check,
    compose,
    concat,
    diagram_from_json,
    diagram_to_json,
    expand_groups,
    weave,
)
from .hierarchy import Hierarchy, HierarchyError, list_catalogs, load_catalog
from .library import (
    canonical_attention,
    canonical_gqa,
    canonical_matmul,
    canonical_mha,
    canonical_softmax_contraction,
)
from .optimizer import (
    FitError,
    GroupPlan,
    InfeasibleError,
    OptimizeError,
    PerfModel,
    closed_form,
    extract_terms,
    optimize_groups,
)
from .oracle import EquivalenceReport, equivalence_check, evaluate, instruction_count
from .pseudocode import (
    DivisorError,
    PseudocodeDiagram,
    PseudocodeError,
    attention_plan,
    config_table,
    variable_table,
)
from .resources import CostReport, cost_report
from .schedule import (
    PipelineCatalog,
    Schedule,
    ScheduleError,
    UtilizationReport,
    build_schedule,
    column_costs,
    utilization,
)
from .streaming import (
    NotStreamable,
    StreamabilityCertificate,
    check_streamable,
    expand_certified,
)

__version__ = "0.1.0"

__all__ = [
    "ArrayShape",
    "Axis",
    "CostReport",
    "DataColumn",
    "Diagram",
    "DiagramError",
    "DivisorError",
    "EquivalenceReport",
    "FitError",
    "GroupPlan",
    "Hierarchy",
    "HierarchyError",
    "InfeasibleError",
    "NotStreamable",
    "OpNode",
    "OptimizeError",
    "PerfModel",
    "PipelineCatalog",
    "PseudocodeDiagram",
    "PseudocodeError",
    "Schedule",
    "ScheduleError",
    "StreamabilityCertificate",
    "UtilizationReport",
    "attention_plan",
    "build_schedule",
    "canonical_attention",
    "canonical_gqa",
    "canonical_matmul",
    "canonical_mha",
    "canonical_softmax_contraction",
    "check",
    "check_streamable",
    "closed_form",
    "column_costs",
    "compose",
    "concat",
    "config_table",
    "cost_report",
    "diagram_from_json",
    "diagram_to_json",
    "equivalence_check",
    "evaluate",
    "expand_certified",
    "expand_groups",
    "extract_terms",
    "instruction_count",
    "list_catalogs",
    "load_catalog",
    "optimize_groups",
    "utilization",
    "variable_table",
    "weave",
]
