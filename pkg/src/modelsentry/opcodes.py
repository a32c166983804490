"""Static opcode table for the pickle serialization format, protocols 0-5.

Every opcode a conforming loader understands is listed here with the byte
that encodes it, the shape of its inline argument, and the protocol that
introduced it.  The table is data, not behavior: decoding lives in
``disasm`` and stack semantics live in ``absvm``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass


class ArgKind(enum.Enum):
    """Shape of the argument bytes that follow an opcode."""

    NONE = "none"
    DECIMAL_NL = "decimal-nl-line"
    STRING_NL = "string-nl-line"
    TWO_NL_LINES = "two-nl-lines"
    U1 = "u1"
    U2_LE = "u2-le"
    U4_LE = "u4-le"
    U8_LE = "u8-le"
    I4_LE = "i4-le"
    F8_BE = "f8-be"
    BYTES_U1 = "length-prefixed-bytes-u1"
    BYTES_U4 = "length-prefixed-bytes-u4"
    BYTES_U8 = "length-prefixed-bytes-u8"
    UTF8_U1 = "length-prefixed-utf8-u1"
    UTF8_U4 = "length-prefixed-utf8-u4"
    UTF8_U8 = "length-prefixed-utf8-u8"
    LONG1 = "long1"
    LONG4 = "long4"


@dataclass(frozen=True)
class OpcodeSpec:
    """One entry of the opcode table."""

    code: int
    mnemonic: str
    arg_kind: ArgKind
    min_protocol: int


def _op(code: bytes, mnemonic: str, arg_kind: ArgKind, min_protocol: int) -> OpcodeSpec:
    return OpcodeSpec(code[0], mnemonic, arg_kind, min_protocol)


# Ordered roughly by protocol generation; byte values are unique (checked below).
_TABLE: tuple[OpcodeSpec, ...] = (
    # Protocol 0: printable-ASCII text opcodes.
    _op(b"(", "MARK", ArgKind.NONE, 0),
    _op(b".", "STOP", ArgKind.NONE, 0),
    _op(b"0", "POP", ArgKind.NONE, 0),
    _op(b"2", "DUP", ArgKind.NONE, 0),
    _op(b"F", "FLOAT", ArgKind.DECIMAL_NL, 0),
    _op(b"I", "INT", ArgKind.DECIMAL_NL, 0),
    _op(b"L", "LONG", ArgKind.DECIMAL_NL, 0),
    _op(b"N", "NONE", ArgKind.NONE, 0),
    _op(b"P", "PERSID", ArgKind.STRING_NL, 0),
    _op(b"R", "REDUCE", ArgKind.NONE, 0),
    _op(b"S", "STRING", ArgKind.STRING_NL, 0),
    _op(b"V", "UNICODE", ArgKind.STRING_NL, 0),
    _op(b"a", "APPEND", ArgKind.NONE, 0),
    _op(b"b", "BUILD", ArgKind.NONE, 0),
    _op(b"c", "GLOBAL", ArgKind.TWO_NL_LINES, 0),
    _op(b"d", "DICT", ArgKind.NONE, 0),
    _op(b"g", "GET", ArgKind.DECIMAL_NL, 0),
    _op(b"i", "INST", ArgKind.TWO_NL_LINES, 0),
    _op(b"l", "LIST", ArgKind.NONE, 0),
    _op(b"p", "PUT", ArgKind.DECIMAL_NL, 0),
    _op(b"s", "SETITEM", ArgKind.NONE, 0),
    _op(b"t", "TUPLE", ArgKind.NONE, 0),
    # Protocol 1: compact binary forms.
    _op(b"Q", "BINPERSID", ArgKind.NONE, 1),
    _op(b"J", "BININT", ArgKind.I4_LE, 1),
    _op(b"K", "BININT1", ArgKind.U1, 1),
    _op(b"M", "BININT2", ArgKind.U2_LE, 1),
    _op(b"T", "BINSTRING", ArgKind.BYTES_U4, 1),
    _op(b"U", "SHORT_BINSTRING", ArgKind.BYTES_U1, 1),
    _op(b"X", "BINUNICODE", ArgKind.UTF8_U4, 1),
    _op(b"G", "BINFLOAT", ArgKind.F8_BE, 1),
    _op(b"]", "EMPTY_LIST", ArgKind.NONE, 1),
    _op(b"e", "APPENDS", ArgKind.NONE, 1),
    _op(b")", "EMPTY_TUPLE", ArgKind.NONE, 1),
    _op(b"}", "EMPTY_DICT", ArgKind.NONE, 1),
    _op(b"u", "SETITEMS", ArgKind.NONE, 1),
    _op(b"1", "POP_MARK", ArgKind.NONE, 1),
    _op(b"h", "BINGET", ArgKind.U1, 1),
    _op(b"j", "LONG_BINGET", ArgKind.U4_LE, 1),
    _op(b"q", "BINPUT", ArgKind.U1, 1),
    _op(b"r", "LONG_BINPUT", ArgKind.U4_LE, 1),
    _op(b"o", "OBJ", ArgKind.NONE, 1),
    # Protocol 2.
    _op(b"\x80", "PROTO", ArgKind.U1, 2),
    _op(b"\x81", "NEWOBJ", ArgKind.NONE, 2),
    _op(b"\x82", "EXT1", ArgKind.U1, 2),
    _op(b"\x83", "EXT2", ArgKind.U2_LE, 2),
    _op(b"\x84", "EXT4", ArgKind.I4_LE, 2),
    _op(b"\x85", "TUPLE1", ArgKind.NONE, 2),
    _op(b"\x86", "TUPLE2", ArgKind.NONE, 2),
    _op(b"\x87", "TUPLE3", ArgKind.NONE, 2),
    _op(b"\x88", "NEWTRUE", ArgKind.NONE, 2),
    _op(b"\x89", "NEWFALSE", ArgKind.NONE, 2),
    _op(b"\x8a", "LONG1", ArgKind.LONG1, 2),
    _op(b"\x8b", "LONG4", ArgKind.LONG4, 2),
    # Protocol 3.
    _op(b"B", "BINBYTES", ArgKind.BYTES_U4, 3),
    _op(b"C", "SHORT_BINBYTES", ArgKind.BYTES_U1, 3),
    # Protocol 4.
    _op(b"\x8c", "SHORT_BINUNICODE", ArgKind.UTF8_U1, 4),
    _op(b"\x8d", "BINUNICODE8", ArgKind.UTF8_U8, 4),
    _op(b"\x8e", "BINBYTES8", ArgKind.BYTES_U8, 4),
    _op(b"\x8f", "EMPTY_SET", ArgKind.NONE, 4),
    _op(b"\x90", "ADDITEMS", ArgKind.NONE, 4),
    _op(b"\x91", "FROZENSET", ArgKind.NONE, 4),
    _op(b"\x92", "NEWOBJ_EX", ArgKind.NONE, 4),
    _op(b"\x93", "STACK_GLOBAL", ArgKind.NONE, 4),
    _op(b"\x94", "MEMOIZE", ArgKind.NONE, 4),
    _op(b"\x95", "FRAME", ArgKind.U8_LE, 4),
    # Protocol 5.
    _op(b"\x96", "BYTEARRAY8", ArgKind.BYTES_U8, 5),
    _op(b"\x97", "NEXT_BUFFER", ArgKind.NONE, 5),
    _op(b"\x98", "READONLY_BUFFER", ArgKind.NONE, 5),
)

_BY_CODE: dict[int, OpcodeSpec] = {spec.code: spec for spec in _TABLE}
_BY_MNEMONIC: dict[str, OpcodeSpec] = {spec.mnemonic: spec for spec in _TABLE}

if len(_BY_CODE) != len(_TABLE):
    raise AssertionError("duplicate byte value in opcode table")


def opcode_table() -> list[OpcodeSpec]:
    """Return the complete opcode table (a fresh list; entries are frozen)."""
    return list(_TABLE)


def lookup(code: int) -> OpcodeSpec | None:
    """Return the OpcodeSpec for a byte value, or None for unassigned bytes."""
    return _BY_CODE.get(code)


def by_mnemonic(mnemonic: str) -> OpcodeSpec:
    """Return the OpcodeSpec for a mnemonic; raises KeyError if unknown."""
    return _BY_MNEMONIC[mnemonic]
