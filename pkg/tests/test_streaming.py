from __future__ import annotations

import dataclasses

import pytest

from weaveperf import diagram as dg
from weaveperf import library, oracle, streaming


def _equiv(d1: dg.Diagram, d2: dg.Diagram, seed: int = 0) -> None:
    rep = oracle.equivalence_check(d1, d2, trials=5, seed=seed, tol=1e-6)
    assert rep.passed, f"max_rel_err={rep.max_rel_err}"


def test_registry_builtin_kernels():
    reg = streaming.registry()
    assert sorted(reg) == ["contraction", "softmax-contraction"]
    sc = reg["softmax-contraction"]
    assert sc.state_arity == 4
    assert sc.spine == ("softmax", "contraction")
    assert set(sc.law_mask) <= set(range(sc.state_arity))
    assert reg["contraction"].state_arity == 1


def test_register_kernel_checks_accumulator_law():
    def forgetful_accumulator(m: int) -> dg.Diagram:
        ax = dg.Axis("k", m)
        y = dg.ArrayShape((), "l1", 4)
        v = dg.ArrayShape((ax,), "l1", 4)
        w = dg.ArrayShape((ax,), "l1", 4)
        return dg.from_steps(
            "forgetful-step",
            dg.DataColumn((y, v, w)),
            [(dg.prim("drop", (0,)), dg.prim("contraction", (1, 2)))],
        )

    base = streaming.registry()["contraction"]
    bad = dataclasses.replace(
        base, name="forgetful", build_accumulator=forgetful_accumulator
    )
    with pytest.raises(streaming.KernelLawError, match="accumulator law"):
        streaming.register_kernel(bad)
    assert "forgetful" not in streaming.registry()


def test_attention_stream_certificate_contents():
    att = library.canonical_attention(6, 8, 2)
    cert = streaming.check_streamable(att, "x")
    assert not isinstance(cert, streaming.NotStreamable)
    assert cert.kernel == "softmax-contraction"
    assert cert.axis == "x"
    assert cert.region == (1, 7)
    assert cert.e_nodes == ((3, 0),)
    assert cert.suffix_nodes == ((5, 0), (7, 0))
    assert [s.axis_names() for s in cert.maintained] == [("q", "d")]
    assert [s.axis_names() for s in cert.auxiliary] == [("q",), ("q",), ("q",)]
    rules = [rule for rule, _ in cert.derivation]
    assert rules[0] == "kernel-base"


def test_matmul_stream_certificate_contents():
    mm = library.canonical_matmul(6, 8, 4)
    cert = streaming.check_streamable(mm, "b")
    assert not isinstance(cert, streaming.NotStreamable)
    assert cert.kernel == "contraction"
    assert cert.region == (1, 3)
    assert cert.e_nodes == ()
    assert cert.suffix_nodes == ((3, 0),)
    assert [s.axis_names() for s in cert.maintained] == [("a", "c")]
    assert cert.auxiliary == ()


def test_output_axes_are_not_streamable():
    att = library.canonical_attention(6, 8, 2)
    for axis in ("q", "d"):
        ns = streaming.check_streamable(att, axis)
        assert isinstance(ns, streaming.NotStreamable)
        assert "retains" in ns.reason


def test_unknown_axis_not_streamable():
    mm = library.canonical_matmul(4, 4, 4)
    ns = streaming.check_streamable(mm, "zz")
    assert isinstance(ns, streaming.NotStreamable)


def test_verify_certificate_roundtrip_and_tamper():
    att = library.canonical_attention(6, 8, 2)
    cert = streaming.check_streamable(att, "x")
    assert streaming.verify_certificate(cert, att)
    other = library.canonical_attention(6, 8, 4)
    assert not streaming.verify_certificate(cert, other)
    forged = dataclasses.replace(cert, region=(1, 5))
    assert not streaming.verify_certificate(forged, att)


def test_expand_attention_matches_original():
    att = library.canonical_attention(6, 8, 2)
    cert = streaming.check_streamable(att, "x")
    for s in (1, 3, 8):  # includes a ragged split 8 = 3 + 3 + 2
        expanded = streaming.expand_certified(att, cert, s)
        assert dg.validate(expanded) == []
        _equiv(att, expanded, seed=s)


def test_expand_matmul_matches_original():
    mm = library.canonical_matmul(5, 12, 3)
    for s in (4, 5, 12):
        _equiv(mm, streaming.expand(mm, "b", s), seed=s)


def test_expand_softmax_contraction_matches_original():
    sc = library.canonical_softmax_contraction(9, 2)
    _equiv(sc, streaming.expand(sc, "x", 4))


def test_expand_rejects_bad_chunk_and_symbolic_axis():
    att = library.canonical_attention(6, 8, 2)
    cert = streaming.check_streamable(att, "x")
    with pytest.raises(streaming.StreamabilityError):
        streaming.expand_certified(att, cert, 0)
    sym = library.canonical_attention(6, "x", 2)
    with pytest.raises(streaming.StreamabilityError):
        streaming.expand(sym, "x", 2)


def test_expand_refuses_non_streamable_axis():
    att = library.canonical_attention(6, 8, 2)
    with pytest.raises(streaming.StreamabilityError):
        streaming.expand(att, "q", 2)


def test_certificate_json_shape():
    mm = library.canonical_matmul(6, 8, 4)
    cert = streaming.check_streamable(mm, "b")
    j = streaming.certificate_to_json(cert)
    assert j["kernel"] == "contraction"
    assert j["axis"] == "b"
    assert j["region"] == [1, 3]
    assert isinstance(j["accumulator"], dict)
    text = streaming.dumps_certified(mm, [cert])
    assert '"certificates"' in text


def test_streamed_relabel_preserves_semantics_via_expand():
    """relabel_stream is cost-level only; its expansion is the semantics."""
    att = library.canonical_attention(6, 8, 2)
    cert = streaming.check_streamable(att, "x")
    rel = dg.relabel_stream(att, "x", 4, cert)
    expanded = streaming.expand(rel, "x", 4)
    _equiv(att, expanded)
