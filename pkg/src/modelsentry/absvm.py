"""Abstract stack machine over disassembled pickle programs.

Re-executes every opcode's stack/memo effect symbolically, building a graph
of placeholder values and emitting security events as it goes.  Nothing is
ever imported, constructed, or called: a GLOBAL pushes a name pair, REDUCE
records that a call *would* happen.

The machine mirrors the reference loader's stack discipline (value stack
plus a metastack of MARK frames, and an integer-keyed memo).  Memo fetches
push ``MemoRef`` placeholders so the value graph itself stays acyclic; the
memo table in the result resolves them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .disasm import PickleProgram


# ---------------------------------------------------------------------------
# Abstract values


class AbstractValue:
    """Base class for symbolic nodes in the reconstructed object graph."""

    __slots__ = ()


@dataclass(frozen=True)
class GlobalRef(AbstractValue):
    """A (module, name) pair as written in the stream, never resolved."""

    module: str
    name: str


@dataclass(frozen=True)
class DynamicGlobalRef(AbstractValue):
    """STACK_GLOBAL whose operands are not two literal text values."""


@dataclass
class CallResult(AbstractValue):
    """The value a loader would get by calling ``callee(*args)``."""

    callee: AbstractValue
    args: tuple
    via: str  # REDUCE | NEWOBJ | NEWOBJ_EX | OBJ | INST
    state: AbstractValue | None = None  # attached by a later BUILD


@dataclass
class Container(AbstractValue):
    """list/tuple/set/frozenset hold elements; dict holds (key, value) pairs."""

    kind: str
    elements: list


@dataclass
class Primitive(AbstractValue):
    value: object


@dataclass(frozen=True)
class PersistentRef(AbstractValue):
    pid_summary: str


@dataclass(frozen=True)
class MemoRef(AbstractValue):
    index: int


@dataclass(frozen=True)
class ExtensionRef(AbstractValue):
    code: int


@dataclass(frozen=True)
class Opaque(AbstractValue):
    note: str = ""


# ---------------------------------------------------------------------------
# Events


@dataclass(frozen=True)
class SecurityEvent:
    at_offset: int

    @property
    def kind(self) -> str:
        return type(self).__name__


@dataclass(frozen=True)
class GlobalResolved(SecurityEvent):
    module: str
    name: str


@dataclass(frozen=True)
class DynamicGlobal(SecurityEvent):
    pass


@dataclass(frozen=True)
class CallMade(SecurityEvent):
    callee: AbstractValue
    argc: int | None
    arg_summary: str
    total_arg_length: int


@dataclass(frozen=True)
class StateBuilt(SecurityEvent):
    pass


@dataclass(frozen=True)
class PersistentId(SecurityEvent):
    id_summary: str


@dataclass(frozen=True)
class ExtensionUsed(SecurityEvent):
    code: int


@dataclass(frozen=True)
class ResidualStack(SecurityEvent):
    depth: int


@dataclass(frozen=True)
class TrailingData(SecurityEvent):
    byte_count: int


@dataclass(frozen=True)
class FrameMismatch(SecurityEvent):
    pass


@dataclass(frozen=True)
class OutOfBandBuffer(SecurityEvent):
    pass


# ---------------------------------------------------------------------------
# Errors and limits


@dataclass(frozen=True)
class VmLimits:
    max_stack_depth: int = 1_000_000
    max_memo_entries: int = 10_000_000


DEFAULT_VM_LIMITS = VmLimits()

ARG_SUMMARY_CAP = 4096


class VmError(Exception):
    def __init__(self, offset: int, message: str):
        super().__init__(f"offset {offset}: {message}")
        self.offset = offset
        self.message = message

    @property
    def kind(self) -> str:
        return type(self).__name__


class StackUnderflow(VmError):
    def __init__(self, offset: int):
        super().__init__(offset, "stack underflow")


class MemoMiss(VmError):
    def __init__(self, offset: int, index: int):
        super().__init__(offset, f"memo has no entry {index}")
        self.index = index


class BadMark(VmError):
    def __init__(self, offset: int):
        super().__init__(offset, "no MARK on metastack")


class LimitExceeded(VmError):
    def __init__(self, offset: int, which: str):
        super().__init__(offset, f"limit exceeded: {which}")
        self.which = which


class UnsupportedOpcode(VmError):
    def __init__(self, offset: int, mnemonic: str):
        super().__init__(offset, f"unsupported opcode {mnemonic}")
        self.mnemonic = mnemonic


@dataclass
class AbstractResult:
    """Outcome of evaluating one program."""

    root: AbstractValue
    events: list[SecurityEvent]
    memo_size: int
    memo: dict[int, AbstractValue] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Rendering (bounded, for summaries and finding evidence)


def render_value(
    value: AbstractValue,
    memo: dict[int, AbstractValue] | None = None,
    limit: int = ARG_SUMMARY_CAP,
) -> str:
    """Render a value graph to bounded, repr-like text."""
    out: list[str] = []
    budget = [limit]

    def put(text: str) -> bool:
        if budget[0] <= 0:
            return False
        if len(text) > budget[0]:
            out.append(text[: budget[0]] + "…")
            budget[0] = 0
            return False
        out.append(text)
        budget[0] -= len(text)
        return True

    def walk(v: AbstractValue, depth: int, seen: frozenset[int]) -> None:
        if budget[0] <= 0:
            return
        if depth > 24:
            put("…")
            return
        if isinstance(v, Primitive):
            put(repr(v.value))
        elif isinstance(v, GlobalRef):
            put(f"{v.module}.{v.name}")
        elif isinstance(v, DynamicGlobalRef):
            put("<dynamic global>")
        elif isinstance(v, MemoRef):
            if memo is not None and v.index in memo and v.index not in seen:
                walk(memo[v.index], depth + 1, seen | {v.index})
            else:
                put(f"<memo {v.index}>")
        elif isinstance(v, CallResult):
            walk(v.callee, depth + 1, seen)
            put("(")
            if isinstance(v.args, tuple):
                for i, a in enumerate(v.args):
                    if i:
                        put(", ")
                    walk(a, depth + 1, seen)
            put(")")
        elif isinstance(v, Container):
            open_close = {
                "list": ("[", "]"),
                "tuple": ("(", ")"),
                "set": ("{", "}"),
                "frozenset": ("frozenset({", "})"),
                "dict": ("{", "}"),
            }[v.kind]
            put(open_close[0])
            for i, item in enumerate(v.elements):
                if i:
                    put(", ")
                if v.kind == "dict":
                    key, val = item
                    walk(key, depth + 1, seen)
                    put(": ")
                    walk(val, depth + 1, seen)
                else:
                    walk(item, depth + 1, seen)
            put(open_close[1])
        elif isinstance(v, PersistentRef):
            put(f"<persistent {v.pid_summary}>")
        elif isinstance(v, ExtensionRef):
            put(f"<extension {v.code}>")
        else:
            put("<opaque>")

    walk(value, 0, frozenset())
    return "".join(out)


def _literal_length(value: AbstractValue, seen: frozenset[int], memo) -> int:
    """Total byte/char count of literal text and bytes in a value graph."""
    if isinstance(value, Primitive) and isinstance(value.value, (str, bytes, bytearray)):
        return len(value.value)
    if isinstance(value, Container):
        total = 0
        for item in value.elements:
            if value.kind == "dict":
                total += _literal_length(item[0], seen, memo)
                total += _literal_length(item[1], seen, memo)
            else:
                total += _literal_length(item, seen, memo)
        return total
    if isinstance(value, CallResult):
        return sum(_literal_length(a, seen, memo) for a in value.args)
    if isinstance(value, MemoRef) and memo is not None and value.index not in seen:
        target = memo.get(value.index)
        if target is not None:
            return _literal_length(target, seen | {value.index}, memo)
    return 0


# ---------------------------------------------------------------------------
# Call-chain summarization


def summarize_call_chain(
    value: AbstractValue, memo: dict[int, AbstractValue] | None = None
) -> list[tuple[str, str]]:
    """List the (module, name) pairs at the roots of all call chains in ``value``.

    The root of a chain is found by following callee edges through nested
    CallResults; a DynamicGlobalRef root contributes the sentinel pair
    ("<dynamic>", "<dynamic>").  Order is a deterministic pre-order walk.
    """
    roots: list[tuple[str, str]] = []

    def deref(v: AbstractValue, seen: frozenset[int]) -> tuple[AbstractValue, frozenset[int]]:
        while isinstance(v, MemoRef) and memo is not None and v.index in memo and v.index not in seen:
            seen = seen | {v.index}
            v = memo[v.index]
        return v, seen

    def chain_root(v: AbstractValue, seen: frozenset[int]) -> tuple[str, str] | None:
        v, seen = deref(v, seen)
        while isinstance(v, CallResult):
            v, seen = deref(v.callee, seen)
        if isinstance(v, GlobalRef):
            return (v.module, v.name)
        if isinstance(v, DynamicGlobalRef):
            return ("<dynamic>", "<dynamic>")
        return None

    def walk(v: AbstractValue, depth: int, seen: frozenset[int]) -> None:
        if depth > 64:
            return
        v, seen = deref(v, seen)
        if isinstance(v, CallResult):
            root = chain_root(v.callee, seen)
            if root is not None:
                roots.append(root)
            # Walk the argument graphs of every call along the callee chain.
            node: AbstractValue = v
            node_seen = seen
            while isinstance(node, CallResult):
                for arg in node.args:
                    walk(arg, depth + 1, node_seen)
                if node.state is not None:
                    walk(node.state, depth + 1, node_seen)
                node, node_seen = deref(node.callee, node_seen)
        elif isinstance(v, Container):
            for item in v.elements:
                if v.kind == "dict":
                    walk(item[0], depth + 1, seen)
                    walk(item[1], depth + 1, seen)
                else:
                    walk(item, depth + 1, seen)

    walk(value, 0, frozenset())
    return roots


def call_roots(
    callee: AbstractValue, memo: dict[int, AbstractValue] | None = None
) -> list[tuple[str, str]]:
    """Root (module, name) of the callee chain behind one CallMade event."""

    def deref(v: AbstractValue, seen: frozenset[int]) -> tuple[AbstractValue, frozenset[int]]:
        while isinstance(v, MemoRef) and memo is not None and v.index in memo and v.index not in seen:
            seen = seen | {v.index}
            v = memo[v.index]
        return v, seen

    value, seen = deref(callee, frozenset())
    hops = 0
    while isinstance(value, CallResult) and hops < 64:
        value, seen = deref(value.callee, seen)
        hops += 1
    if isinstance(value, GlobalRef):
        return [(value.module, value.name)]
    if isinstance(value, DynamicGlobalRef):
        return [("<dynamic>", "<dynamic>")]
    return []


# ---------------------------------------------------------------------------
# The machine


class _Machine:
    def __init__(self, limits: VmLimits):
        self.limits = limits
        self.stack: list[AbstractValue] = []
        self.metastack: list[list[AbstractValue]] = []
        self.memo: dict[int, AbstractValue] = {}
        self.events: list[SecurityEvent] = []
        self.root: AbstractValue | None = None
        self.offset = 0

    # -- primitives ---------------------------------------------------------

    def push(self, value: AbstractValue) -> None:
        if len(self.stack) >= self.limits.max_stack_depth:
            raise LimitExceeded(self.offset, "max_stack_depth")
        self.stack.append(value)

    def pop(self) -> AbstractValue:
        if not self.stack:
            raise StackUnderflow(self.offset)
        return self.stack.pop()

    def peek(self) -> AbstractValue:
        if not self.stack:
            raise StackUnderflow(self.offset)
        return self.stack[-1]

    def pop_mark(self) -> list[AbstractValue]:
        if not self.metastack:
            raise BadMark(self.offset)
        items = self.stack
        self.stack = self.metastack.pop()
        return items

    def memo_put(self, index: int) -> None:
        if index < 0:
            raise MemoMiss(self.offset, index)
        if len(self.memo) >= self.limits.max_memo_entries:
            raise LimitExceeded(self.offset, "max_memo_entries")
        self.memo[index] = self.peek()

    def deref(self, value: AbstractValue) -> AbstractValue:
        seen: set[int] = set()
        while isinstance(value, MemoRef) and value.index in self.memo and value.index not in seen:
            seen.add(value.index)
            value = self.memo[value.index]
        return value

    def emit(self, event: SecurityEvent) -> None:
        self.events.append(event)

    # -- opcode handlers ----------------------------------------------------

    def op_proto(self, arg) -> None:
        pass

    def op_frame(self, arg) -> None:
        pass  # frame accounting happens in evaluate()

    def op_stop(self, arg) -> None:
        self.root = self.pop()
        depth = len(self.stack) + sum(len(frame) for frame in self.metastack)
        if depth > 0:
            self.emit(ResidualStack(self.offset, depth))

    # constants
    def op_none(self, arg) -> None:
        self.push(Primitive(None))

    def op_newtrue(self, arg) -> None:
        self.push(Primitive(True))

    def op_newfalse(self, arg) -> None:
        self.push(Primitive(False))

    def op_literal(self, arg) -> None:
        self.push(Primitive(arg))

    def op_bytearray8(self, arg) -> None:
        self.push(Primitive(bytearray(arg)))

    # containers
    def op_empty_list(self, arg) -> None:
        self.push(Container("list", []))

    def op_empty_dict(self, arg) -> None:
        self.push(Container("dict", []))

    def op_empty_set(self, arg) -> None:
        self.push(Container("set", []))

    def op_empty_tuple(self, arg) -> None:
        self.push(Container("tuple", []))

    def op_list(self, arg) -> None:
        items = self.pop_mark()
        self.push(Container("list", items))

    def op_tuple(self, arg) -> None:
        items = self.pop_mark()
        self.push(Container("tuple", items))

    def op_tuple1(self, arg) -> None:
        a = self.pop()
        self.push(Container("tuple", [a]))

    def op_tuple2(self, arg) -> None:
        b, a = self.pop(), self.pop()
        self.push(Container("tuple", [a, b]))

    def op_tuple3(self, arg) -> None:
        c, b, a = self.pop(), self.pop(), self.pop()
        self.push(Container("tuple", [a, b, c]))

    def op_dict(self, arg) -> None:
        items = self.pop_mark()
        pairs = [(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
        self.push(Container("dict", pairs))

    def op_frozenset(self, arg) -> None:
        items = self.pop_mark()
        self.push(Container("frozenset", items))

    def op_append(self, arg) -> None:
        value = self.pop()
        target = self.deref(self.peek())
        if isinstance(target, Container) and target.kind in ("list", "set"):
            target.elements.append(value)

    def op_appends(self, arg) -> None:
        items = self.pop_mark()
        target = self.deref(self.peek())
        if isinstance(target, Container) and target.kind in ("list", "set"):
            target.elements.extend(items)

    def op_additems(self, arg) -> None:
        items = self.pop_mark()
        target = self.deref(self.peek())
        if isinstance(target, Container) and target.kind == "set":
            target.elements.extend(items)

    def op_setitem(self, arg) -> None:
        value = self.pop()
        key = self.pop()
        target = self.deref(self.peek())
        if isinstance(target, Container) and target.kind == "dict":
            target.elements.append((key, value))

    def op_setitems(self, arg) -> None:
        items = self.pop_mark()
        target = self.deref(self.peek())
        if isinstance(target, Container) and target.kind == "dict":
            for i in range(0, len(items) - 1, 2):
                target.elements.append((items[i], items[i + 1]))

    # stack plumbing
    def op_mark(self, arg) -> None:
        if len(self.metastack) >= self.limits.max_stack_depth:
            raise LimitExceeded(self.offset, "max_stack_depth (metastack)")
        self.metastack.append(self.stack)
        self.stack = []

    def op_pop(self, arg) -> None:
        if self.stack:
            self.stack.pop()
        else:
            self.pop_mark()

    def op_pop_mark(self, arg) -> None:
        self.pop_mark()

    def op_dup(self, arg) -> None:
        self.push(self.peek())

    # memo
    def op_get(self, arg) -> None:
        index = int(arg)
        if index not in self.memo:
            raise MemoMiss(self.offset, index)
        self.push(MemoRef(index))

    def op_put(self, arg) -> None:
        self.memo_put(int(arg))

    def op_memoize(self, arg) -> None:
        self.memo_put(len(self.memo))

    # globals and calls
    def op_global(self, arg) -> None:
        module, name = arg
        self.emit(GlobalResolved(self.offset, module, name))
        self.push(GlobalRef(module, name))

    def op_stack_global(self, arg) -> None:
        name_v = self.deref(self.pop())
        module_v = self.deref(self.pop())
        if (
            isinstance(name_v, Primitive)
            and isinstance(name_v.value, str)
            and isinstance(module_v, Primitive)
            and isinstance(module_v.value, str)
        ):
            self.emit(GlobalResolved(self.offset, module_v.value, name_v.value))
            self.push(GlobalRef(module_v.value, name_v.value))
        else:
            self.emit(DynamicGlobal(self.offset))
            self.push(DynamicGlobalRef())

    def op_reduce(self, arg) -> None:
        args_v = self.pop()
        callee = self.pop()
        resolved = self.deref(args_v)
        if isinstance(resolved, Container) and resolved.kind == "tuple":
            args = tuple(resolved.elements)
        else:
            args = (args_v,)
        argc = len(args) if isinstance(resolved, Container) and resolved.kind == "tuple" else None
        summary = render_value(args_v, self.memo, ARG_SUMMARY_CAP)
        total = _literal_length(args_v, frozenset(), self.memo)
        self.emit(CallMade(self.offset, callee, argc, summary, total))
        self.push(CallResult(callee=callee, args=args, via="REDUCE"))

    def op_newobj(self, arg) -> None:
        args_v = self.pop()
        cls = self.pop()
        resolved = self.deref(args_v)
        if isinstance(resolved, Container) and resolved.kind == "tuple":
            args = tuple(resolved.elements)
        else:
            args = (args_v,)
        self.record_call_with(cls, args, "NEWOBJ")

    def op_newobj_ex(self, arg) -> None:
        kwargs_v = self.pop()
        args_v = self.pop()
        cls = self.pop()
        self.record_call_with(cls, (args_v, kwargs_v), "NEWOBJ_EX")

    def op_obj(self, arg) -> None:
        items = self.pop_mark()
        if not items:
            raise StackUnderflow(self.offset)
        cls, args = items[0], tuple(items[1:])
        self.record_call_with(cls, args, "OBJ")

    def op_inst(self, arg) -> None:
        module, name = arg
        items = self.pop_mark()
        self.record_call_with(GlobalRef(module, name), tuple(items), "INST")

    def record_call_with(self, callee: AbstractValue, args: tuple, via: str) -> None:
        args_value = Container("tuple", list(args))
        summary = render_value(args_value, self.memo, ARG_SUMMARY_CAP)
        total = _literal_length(args_value, frozenset(), self.memo)
        self.emit(CallMade(self.offset, callee, len(args), summary, total))
        self.push(CallResult(callee=callee, args=args, via=via))

    def op_build(self, arg) -> None:
        state = self.pop()
        target = self.deref(self.peek())
        self.emit(StateBuilt(self.offset))
        if isinstance(target, CallResult):
            target.state = state

    # persistent ids, extensions, buffers
    def op_persid(self, arg) -> None:
        summary = str(arg)[:256]
        self.emit(PersistentId(self.offset, summary))
        self.push(PersistentRef(summary))

    def op_binpersid(self, arg) -> None:
        pid = self.pop()
        summary = render_value(pid, self.memo, 256)
        self.emit(PersistentId(self.offset, summary))
        self.push(PersistentRef(summary))

    def op_ext(self, arg) -> None:
        code = int(arg)
        self.emit(ExtensionUsed(self.offset, code))
        self.push(ExtensionRef(code))

    def op_next_buffer(self, arg) -> None:
        self.emit(OutOfBandBuffer(self.offset))
        self.push(Opaque("out-of-band buffer"))

    def op_readonly_buffer(self, arg) -> None:
        self.emit(OutOfBandBuffer(self.offset))
        self.pop()
        self.push(Opaque("read-only buffer view"))


_DISPATCH = {
    "PROTO": _Machine.op_proto,
    "FRAME": _Machine.op_frame,
    "STOP": _Machine.op_stop,
    "NONE": _Machine.op_none,
    "NEWTRUE": _Machine.op_newtrue,
    "NEWFALSE": _Machine.op_newfalse,
    "INT": _Machine.op_literal,
    "BININT": _Machine.op_literal,
    "BININT1": _Machine.op_literal,
    "BININT2": _Machine.op_literal,
    "LONG": _Machine.op_literal,
    "LONG1": _Machine.op_literal,
    "LONG4": _Machine.op_literal,
    "FLOAT": _Machine.op_literal,
    "BINFLOAT": _Machine.op_literal,
    "STRING": _Machine.op_literal,
    "BINSTRING": _Machine.op_literal,
    "SHORT_BINSTRING": _Machine.op_literal,
    "UNICODE": _Machine.op_literal,
    "BINUNICODE": _Machine.op_literal,
    "SHORT_BINUNICODE": _Machine.op_literal,
    "BINUNICODE8": _Machine.op_literal,
    "BINBYTES": _Machine.op_literal,
    "SHORT_BINBYTES": _Machine.op_literal,
    "BINBYTES8": _Machine.op_literal,
    "BYTEARRAY8": _Machine.op_bytearray8,
    "EMPTY_LIST": _Machine.op_empty_list,
    "EMPTY_DICT": _Machine.op_empty_dict,
    "EMPTY_SET": _Machine.op_empty_set,
    "EMPTY_TUPLE": _Machine.op_empty_tuple,
    "LIST": _Machine.op_list,
    "TUPLE": _Machine.op_tuple,
    "TUPLE1": _Machine.op_tuple1,
    "TUPLE2": _Machine.op_tuple2,
    "TUPLE3": _Machine.op_tuple3,
    "DICT": _Machine.op_dict,
    "FROZENSET": _Machine.op_frozenset,
    "APPEND": _Machine.op_append,
    "APPENDS": _Machine.op_appends,
    "ADDITEMS": _Machine.op_additems,
    "SETITEM": _Machine.op_setitem,
    "SETITEMS": _Machine.op_setitems,
    "MARK": _Machine.op_mark,
    "POP": _Machine.op_pop,
    "POP_MARK": _Machine.op_pop_mark,
    "DUP": _Machine.op_dup,
    "GET": _Machine.op_get,
    "BINGET": _Machine.op_get,
    "LONG_BINGET": _Machine.op_get,
    "PUT": _Machine.op_put,
    "BINPUT": _Machine.op_put,
    "LONG_BINPUT": _Machine.op_put,
    "MEMOIZE": _Machine.op_memoize,
    "GLOBAL": _Machine.op_global,
    "STACK_GLOBAL": _Machine.op_stack_global,
    "REDUCE": _Machine.op_reduce,
    "NEWOBJ": _Machine.op_newobj,
    "NEWOBJ_EX": _Machine.op_newobj_ex,
    "OBJ": _Machine.op_obj,
    "INST": _Machine.op_inst,
    "BUILD": _Machine.op_build,
    "PERSID": _Machine.op_persid,
    "BINPERSID": _Machine.op_binpersid,
    "EXT1": _Machine.op_ext,
    "EXT2": _Machine.op_ext,
    "EXT4": _Machine.op_ext,
    "NEXT_BUFFER": _Machine.op_next_buffer,
    "READONLY_BUFFER": _Machine.op_readonly_buffer,
}


def _frame_mismatches(program: PickleProgram) -> list[int]:
    """Offsets of FRAME anomalies: nested frames, straddled boundaries,
    or a final frame claiming bytes the stream does not have."""
    mismatches: list[int] = []
    frame_end: int | None = None
    frame_offset = 0
    for instr in program.instructions:
        if frame_end is not None and instr.offset >= frame_end:
            frame_end = None
        if instr.mnemonic == "FRAME":
            if frame_end is not None:
                mismatches.append(instr.offset)
            frame_end = instr.offset + instr.size + int(instr.arg)
            frame_offset = instr.offset
        elif frame_end is not None and instr.offset + instr.size > frame_end:
            mismatches.append(instr.offset)
            frame_end = None
    stream_end = program.start_offset + program.byte_length + program.trailing_bytes
    if frame_end is not None and frame_end > stream_end:
        mismatches.append(frame_offset)
    return mismatches


def evaluate(program: PickleProgram, limits: VmLimits = DEFAULT_VM_LIMITS) -> AbstractResult:
    """Symbolically execute ``program`` and collect its security events.

    Pure function of its inputs: identical programs yield identical results,
    and no side effect of any kind is performed.
    """
    machine = _Machine(limits)
    frame_anomalies = set(_frame_mismatches(program))
    for instr in program.instructions:
        machine.offset = instr.offset
        if instr.offset in frame_anomalies:
            machine.emit(FrameMismatch(instr.offset))
            frame_anomalies.discard(instr.offset)
        handler = _DISPATCH.get(instr.mnemonic)
        if handler is None:
            raise UnsupportedOpcode(instr.offset, instr.mnemonic)
        handler(machine, instr.arg)
    if machine.root is None:
        # The disassembler guarantees a STOP; guard anyway.
        raise UnsupportedOpcode(machine.offset, "program did not reach STOP")
    if program.trailing_bytes > 0:
        last_offset = program.instructions[-1].offset
        machine.emit(TrailingData(last_offset, program.trailing_bytes))
    return AbstractResult(
        root=machine.root,
        events=machine.events,
        memo_size=len(machine.memo),
        memo=machine.memo,
    )
