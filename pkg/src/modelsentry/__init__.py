"""modelsentry: static security scanner for serialized ML model files."""

from .absvm import AbstractResult, SecurityEvent, evaluate, summarize_call_chain
from .disasm import (
    Instruction,
    ParseError,
    ParseLimits,
    PickleProgram,
    disassemble,
    disassemble_concatenated,
)
from .opcodes import OpcodeSpec, opcode_table
from .policy import Finding, Policy, Severity, classify_global, default_policy
from .scanner import FileReport, ScanReport, scan_file, scan_paths, scan_tree, sniff

__version__ = "0.1.0"

__all__ = [
    "AbstractResult",
    "FileReport",
    "Finding",
    "Instruction",
    "OpcodeSpec",
    "ParseError",
    "ParseLimits",
    "PickleProgram",
    "Policy",
    "ScanReport",
    "SecurityEvent",
    "Severity",
    "classify_global",
    "default_policy",
    "disassemble",
    "disassemble_concatenated",
    "evaluate",
    "opcode_table",
    "scan_file",
    "scan_paths",
    "scan_tree",
    "sniff",
    "summarize_call_chain",
    "__version__",
]
