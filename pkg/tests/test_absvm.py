"""Abstract machine semantics, anchored to the real loader.

The structural oracle loads each benign stream with the actual unpickler
and compares shapes; the attack streams are checked through the stubbed
sacrificial loader from conftest.
"""

from __future__ import annotations

import pickle

import pytest

from conftest import benign_streams, structural_match, stub_load
from modelsentry import absvm
from modelsentry.absvm import (
    BadMark,
    CallMade,
    CallResult,
    Container,
    DynamicGlobal,
    GlobalRef,
    GlobalResolved,
    MemoMiss,
    MemoRef,
    OutOfBandBuffer,
    Primitive,
    ResidualStack,
    StackUnderflow,
    StateBuilt,
    TrailingData,
    call_roots,
    evaluate,
    render_value,
    summarize_call_chain,
)
from modelsentry.disasm import disassemble
from modelsentry.forge import emit_injected_pickle, emit_reduce_payload_pickle

MARKER = "true # FIXTURE-MARKER"


def run(stream: bytes) -> absvm.AbstractResult:
    return evaluate(disassemble(stream))


def test_minimal_stream_has_no_events():
    result = run(b"N.")
    assert result.events == []
    assert isinstance(result.root, Primitive)
    assert result.root.value is None


def test_reduce_payload_events():
    result = run(emit_reduce_payload_pickle(MARKER, 2))
    kinds = [event.kind for event in result.events]
    assert kinds == ["GlobalResolved", "CallMade"]
    resolved = result.events[0]
    assert (resolved.module, resolved.name) == ("os", "system")
    call = result.events[1]
    assert call.argc == 1
    assert MARKER in call.arg_summary
    assert isinstance(result.root, CallResult)
    assert not any(isinstance(event, ResidualStack) for event in result.events)


@pytest.mark.parametrize("protocol,root_value", [(0, [1, 2, 3]), (2, {"a": 1}), (4, "ok")])
def test_injected_stream_yields_residual_stack_and_loader_hides_it(protocol, root_value):
    stream = emit_injected_pickle(root_value, MARKER, protocol)
    result = run(stream)
    residuals = [event for event in result.events if isinstance(event, ResidualStack)]
    assert len(residuals) == 1
    assert residuals[0].depth >= 1
    # Dual oracle: the sacrificial loader returns only the benign root.
    assert stub_load(stream) == root_value


def test_reduce_streams_never_report_residual_stack():
    for protocol in (0, 1, 2, 3, 4, 5):
        result = run(emit_reduce_payload_pickle(MARKER, protocol))
        assert not any(isinstance(event, ResidualStack) for event in result.events)


def test_event_completeness_matches_instruction_counts():
    streams = [stream for _, stream, _ in benign_streams(25)]
    streams.append(emit_reduce_payload_pickle(MARKER, 4))
    streams.append(emit_injected_pickle([1], MARKER, 2))
    for stream in streams:
        program = disassemble(stream)
        result = evaluate(program)
        globals_in_stream = sum(
            1 for i in program.instructions if i.mnemonic in ("GLOBAL", "STACK_GLOBAL")
        )
        calls_in_stream = sum(
            1
            for i in program.instructions
            if i.mnemonic in ("REDUCE", "NEWOBJ", "NEWOBJ_EX", "OBJ", "INST")
        )
        assert (
            sum(1 for e in result.events if isinstance(e, (GlobalResolved, DynamicGlobal)))
            == globals_in_stream
        )
        assert sum(1 for e in result.events if isinstance(e, CallMade)) == calls_in_stream


def test_structure_matches_real_loader_on_benign_corpus():
    checked = 0
    for name, stream, value in benign_streams(60):
        result = run(stream)
        loaded = pickle.loads(stream)
        assert loaded == value or (value != value), name  # generator avoids NaN
        assert structural_match(result.root, loaded, result.memo), name
        checked += 1
    assert checked >= 50


def test_determinism():
    stream = emit_injected_pickle({"a": [1, 2]}, MARKER, 4)
    first = run(stream)
    second = run(stream)
    assert first.events == second.events
    assert render_value(first.root, first.memo) == render_value(second.root, second.memo)
    assert first.memo_size == second.memo_size


# -- call-chain summaries ----------------------------------------------------


def test_summarize_direct_call():
    value = CallResult(GlobalRef("os", "system"), (Primitive("x"),), "REDUCE")
    assert summarize_call_chain(value) == [("os", "system")]


def test_summarize_primitive_is_empty():
    assert summarize_call_chain(Primitive(7)) == []


def test_summarize_nested_call_reports_innermost_root():
    inner = CallResult(GlobalRef("builtins", "getattr"), (), "REDUCE")
    outer = CallResult(inner, (Primitive(1),), "REDUCE")
    assert summarize_call_chain(outer) == [("builtins", "getattr")]


def test_summarize_dynamic_contributes_sentinel():
    value = CallResult(absvm.DynamicGlobalRef(), (), "REDUCE")
    assert summarize_call_chain(value) == [("<dynamic>", "<dynamic>")]


def test_call_roots_resolves_through_memo():
    memo = {3: GlobalRef("os", "system")}
    assert call_roots(MemoRef(3), memo) == [("os", "system")]
    assert call_roots(MemoRef(9), memo) == []


def test_summarize_walks_containers():
    value = Container(
        "list", [Primitive(1), CallResult(GlobalRef("a", "b"), (), "REDUCE")]
    )
    assert summarize_call_chain(value) == [("a", "b")]


# -- individual opcode families ----------------------------------------------


def test_memo_roundtrip_and_self_reference():
    # list that contains itself via the memo: legitimate cycle, no recursion blowup
    result = run(b"]q\x00h\x00a.")
    assert isinstance(result.root, Container)
    assert result.root.elements == [MemoRef(0)]
    # rendering resolves one level, then the cycle guard stops it
    assert render_value(result.root, result.memo) == "[[<memo 0>]]"


def test_memoize_and_get():
    result = run(b"\x80\x04\x8c\x02hi\x94h\x00\x86.")
    root = result.root
    assert isinstance(root, Container) and root.kind == "tuple"
    assert isinstance(root.elements[0], Primitive)
    assert root.elements[1] == MemoRef(0)


def test_memo_miss_is_error():
    with pytest.raises(MemoMiss) as excinfo:
        run(b"Ng5\n.")
    assert excinfo.value.index == 5


def test_negative_put_rejected():
    with pytest.raises(MemoMiss):
        run(b"Np-1\n.")


def test_stack_underflow():
    with pytest.raises(StackUnderflow):
        run(b"R.")
    with pytest.raises(StackUnderflow):
        run(b".")


def test_bad_mark():
    with pytest.raises(BadMark):
        run(b"N1.")


def test_stack_global_literal_and_dynamic():
    literal = run(b"\x80\x04\x8c\x02os\x8c\x06system\x93.")
    assert literal.events[0] == GlobalResolved(14, "os", "system")
    dynamic = run(b"\x80\x04)\x8c\x06system\x93.")
    assert [event.kind for event in dynamic.events] == ["DynamicGlobal"]
    assert isinstance(dynamic.root, absvm.DynamicGlobalRef)


def test_stack_global_through_memo_is_still_literal():
    # name strings memoized, popped, fetched back via BINGET: the import
    # target is still statically determined, so no DynamicGlobal
    stream = (
        b"\x80\x04"
        b"\x8c\x02os\x94"  # push "os", memo[0]
        b"\x8c\x06system\x94"  # push "system", memo[1]
        b"00"  # POP POP
        b"h\x00h\x01"  # push MemoRef(0), MemoRef(1)
        b"\x93."
    )
    result = run(stream)
    events = [event for event in result.events if isinstance(event, GlobalResolved)]
    assert len(events) == 1
    assert (events[0].module, events[0].name) == ("os", "system")
    assert not any(isinstance(event, DynamicGlobal) for event in result.events)


def test_trailing_data_event():
    result = evaluate(disassemble(b"N." + b"\x00\x01"))
    trailing = [event for event in result.events if isinstance(event, TrailingData)]
    assert len(trailing) == 1
    assert trailing[0].byte_count == 2


def test_out_of_band_buffer_is_soft():
    result = run(b"\x80\x05\x97.")
    assert [event.kind for event in result.events] == ["OutOfBandBuffer"]
    assert isinstance(result.root, absvm.Opaque)


def test_readonly_buffer_substitutes_opaque():
    result = run(b"\x80\x05\x97\x98.")
    assert [event.kind for event in result.events] == ["OutOfBandBuffer", "OutOfBandBuffer"]
    assert isinstance(result.root, absvm.Opaque)


def test_build_attaches_state_and_emits_event():
    stream = b"cmod\nCls\n)R}(V__hidden__\nVvalue\nub."
    result = run(stream)
    built = [event for event in result.events if isinstance(event, StateBuilt)]
    assert len(built) == 1
    assert isinstance(result.root, CallResult)
    assert isinstance(result.root.state, Container)


def test_inst_emits_call_only():
    result = run(b"(Vx\nios\nsystem\n.")
    kinds = [event.kind for event in result.events]
    assert kinds == ["CallMade"]
    call = result.events[0]
    assert call_roots(call.callee, result.memo) == [("os", "system")]


def test_frame_mismatch_informational():
    # FRAME claims 1 byte but a 2-byte instruction sits inside it
    straddle = b"\x80\x04\x95\x01\x00\x00\x00\x00\x00\x00\x00K\x07."
    result = run(straddle)
    assert "FrameMismatch" in [event.kind for event in result.events]
    # frame claiming bytes past the end of the stream
    overlong = b"\x80\x04\x95\x63\x00\x00\x00\x00\x00\x00\x00N."
    result = run(overlong)
    assert "FrameMismatch" in [event.kind for event in result.events]
    # well-framed stream stays quiet
    clean = pickle.dumps([1, 2, 3], 4)
    result = run(clean)
    assert "FrameMismatch" not in [event.kind for event in result.events]


def test_arg_summary_is_bounded_with_total_length():
    big = "A" * 10_000
    result = run(emit_reduce_payload_pickle(big, 2))
    call = next(event for event in result.events if isinstance(event, CallMade))
    assert len(call.arg_summary) <= absvm.ARG_SUMMARY_CAP + 8
    assert call.total_arg_length == 10_000


def test_persistent_id_events():
    result = run(b"Pweights.0\nQ.")
    kinds = [event.kind for event in result.events]
    assert kinds == ["PersistentId", "PersistentId"]


def test_rare_opcodes_evaluate_with_complete_events():
    from conftest import RARE_OPCODE_STREAMS

    for name, stream in RARE_OPCODE_STREAMS:
        program = disassemble(stream)
        result = evaluate(program)
        globals_in_stream = sum(
            1 for i in program.instructions if i.mnemonic in ("GLOBAL", "STACK_GLOBAL")
        )
        calls_in_stream = sum(
            1
            for i in program.instructions
            if i.mnemonic in ("REDUCE", "NEWOBJ", "NEWOBJ_EX", "OBJ", "INST")
        )
        assert (
            sum(1 for e in result.events if isinstance(e, (GlobalResolved, DynamicGlobal)))
            == globals_in_stream
        ), name
        assert sum(1 for e in result.events if isinstance(e, CallMade)) == calls_in_stream, name


def test_extension_codes_recorded():
    result = run(b"\x80\x02\x82\x07.")
    assert [event.kind for event in result.events] == ["ExtensionUsed"]
    assert result.events[0].code == 7
    assert result.root == absvm.ExtensionRef(7)
