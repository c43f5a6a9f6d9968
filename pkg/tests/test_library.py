from __future__ import annotations

import pytest

from weaveperf import diagram as dg
from weaveperf import library
from weaveperf import streaming


def test_matmul_interface():
    d = library.canonical_matmul(4, 5, 6)
    assert d.name == "matmul"
    assert len(d.input_column.segments) == 2
    assert len(d.output_column.segments) == 1
    out = d.output_column.segments[0]
    assert tuple(out.axis_names()) == ("a", "c")


def test_attention_interface():
    d = library.canonical_attention(3, 4, 2)
    assert d.name == "attention"
    assert len(d.input_column.segments) == 3
    out = d.output_column.segments[0]
    assert set(out.axis_names()) == {"q", "d"}


def test_mha_carries_head_axis_everywhere():
    d = library.canonical_mha(2, 3, 4, 2)
    for seg in (*d.input_column.segments, *d.output_column.segments):
        assert "h" in seg.axis_names()


def test_gqa_head_axis_only_on_queries_and_output():
    d = library.canonical_gqa(2, 3, 4, 2)
    names = [seg.axis_names() for seg in d.input_column.segments]
    q_axes, k_axes, v_axes = names
    assert "g" in q_axes
    assert "g" not in k_axes and "g" not in v_axes
    assert "g" in d.output_column.segments[0].axis_names()


def test_attention_stream_axis_is_certified():
    d = library.canonical_attention(3, 4, 2)
    cert = streaming.check_streamable(d, "x")
    assert not isinstance(cert, streaming.NotStreamable)
    assert cert.kernel == "softmax-contraction"


def test_softmax_contraction_is_certified():
    d = library.canonical_softmax_contraction(6, 2)
    cert = streaming.check_streamable(d, "x")
    assert not isinstance(cert, streaming.NotStreamable)


def test_matmul_contraction_is_certified():
    d = library.canonical_matmul(4, 5, 6)
    cert = streaming.check_streamable(d, "b")
    assert not isinstance(cert, streaming.NotStreamable)
    assert cert.kernel == "contraction"


def test_symbolic_sizes_are_allowed():
    d = library.canonical_attention("q", "x", "d")
    sizes = d.axis_sizes()
    assert all(not isinstance(v, int) for v in sizes.values())
    assert dg.validate(d) == []


def test_quant_is_threaded_through():
    d = library.canonical_matmul(4, 5, 6, quant=2)
    assert all(seg.quant == 2 for seg in d.input_column.segments)


def test_levels_are_annotated():
    d = library.canonical_matmul(4, 5, 6, src="l0", dst="l1")
    assert {seg.level for seg in d.input_column.segments} == {"l0"}
