"""Scan orchestration: sniff a file, route it to parsers, collect findings.

Per-file scans are pure functions of the file bytes and the policy, so a
directory scan can fan out over a worker pool and still assemble the same
report regardless of scheduling.  Nothing in this module writes anywhere;
the only output is the returned report structure.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import absvm, containers, disasm
from .kerascfg import ConfigAnomaly, walk_layers
from .policy import (
    FileContext,
    Finding,
    IntegrityManifest,
    Policy,
    Severity,
    apply_keras_rules,
    apply_rules,
    verify_integrity,
)

TOOL_VERSION = "0.1.0"

_SNIFF_BYTES = 512


@dataclass(frozen=True)
class FileKind:
    kind: str  # zip_archive | hdf5 | pickle_stream | unknown
    confidence: str  # magic | heuristic


@dataclass(frozen=True)
class ScanLimits:
    parse: disasm.ParseLimits = disasm.DEFAULT_PARSE_LIMITS
    vm: absvm.VmLimits = absvm.DEFAULT_VM_LIMITS
    entry_cap: int = containers.DEFAULT_ENTRY_CAP
    config_cap: int = 64 * 1024 * 1024


DEFAULT_SCAN_LIMITS = ScanLimits()


@dataclass(frozen=True)
class ScanError:
    kind: str
    locus: str
    message: str


@dataclass
class FileReport:
    path: str
    kind: str
    findings: list[Finding] = field(default_factory=list)
    errors: list[ScanError] = field(default_factory=list)
    bytes_scanned: int = 0
    duration: float = 0.0


@dataclass
class ScanReport:
    tool_version: str
    policy_digest: str
    files: list[FileReport]
    exit_severity_threshold: Severity = Severity.HIGH

    def summary(self) -> dict[str, int]:
        counts = {"critical": 0, "high": 0, "medium": 0, "low": 0, "info": 0}
        for file_report in self.files:
            for finding in file_report.findings:
                counts[finding.severity.name.lower()] += 1
        return counts

    def has_errors(self) -> bool:
        return any(file_report.errors for file_report in self.files)

    def max_severity(self) -> Severity | None:
        worst: Severity | None = None
        for file_report in self.files:
            for finding in file_report.findings:
                if worst is None or finding.severity > worst:
                    worst = finding.severity
        return worst


def sniff(first_bytes: bytes, length: int) -> FileKind:
    """Classify by magic first, content heuristics second."""
    if first_bytes.startswith(containers.ZIP_LOCAL_MAGIC) or first_bytes.startswith(
        containers.ZIP_EOCD_MAGIC
    ):
        return FileKind("zip_archive", "magic")
    if first_bytes.startswith(containers.HDF5_SIGNATURE):
        return FileKind("hdf5", "magic")
    if disasm.plausible_pickle_prefix(first_bytes, complete=length <= len(first_bytes)):
        return FileKind("pickle_stream", "heuristic")
    return FileKind("unknown", "heuristic")


def _scan_pickle_bytes(
    data: bytes,
    ctx: FileContext,
    policy: Policy,
    limits: ScanLimits,
    findings: list[Finding],
    errors: list[ScanError],
) -> None:
    """Disassemble, evaluate, and apply rules to every stream segment."""
    programs: list[disasm.PickleProgram] = []
    try:
        for program in disasm.iter_programs(data, limits.parse):
            programs.append(program)
    except disasm.ParseError as exc:
        locus = ctx.entry or ""
        errors.append(
            ScanError(exc.kind, f"{locus}:offset {exc.offset}".lstrip(":"), exc.message)
        )
        findings.append(
            Finding(
                rule_id="FORMAT_PARSE_ERROR",
                severity=Severity.LOW,
                file=ctx.path,
                message=f"pickle segment could not be parsed: {exc.message}",
                entry=ctx.entry,
                offset=exc.offset,
            )
        )
    for program in programs:
        try:
            result = absvm.evaluate(program, limits.vm)
        except absvm.VmError as exc:
            locus = ctx.entry or ""
            errors.append(
                ScanError(exc.kind, f"{locus}:offset {exc.offset}".lstrip(":"), exc.message)
            )
            findings.append(
                Finding(
                    rule_id="FORMAT_PARSE_ERROR",
                    severity=Severity.LOW,
                    file=ctx.path,
                    message=f"pickle stream is not loadable: {exc.message}",
                    entry=ctx.entry,
                    offset=exc.offset,
                )
            )
            continue
        roots = [
            absvm.call_roots(event.callee, result.memo)
            if isinstance(event, absvm.CallMade)
            else []
            for event in result.events
        ]
        findings.extend(apply_rules(result.events, roots, policy, ctx))


def _scan_keras_config(
    config_text: str,
    ctx: FileContext,
    policy: Policy,
    findings: list[Finding],
    errors: list[ScanError],
) -> None:
    try:
        config = json.loads(config_text)
    except json.JSONDecodeError as exc:
        errors.append(ScanError("ConfigParseError", ctx.entry or "", str(exc)))
        findings.append(
            Finding(
                rule_id="FORMAT_PARSE_ERROR",
                severity=Severity.LOW,
                file=ctx.path,
                message=f"model config is not valid JSON: {exc}",
                entry=ctx.entry,
            )
        )
        return
    anomalies: list[ConfigAnomaly] = []
    payload_classes = frozenset({"Lambda"}) | frozenset(policy.extra_custom_layer_classes)
    records = walk_layers(config, anomalies, payload_classes)
    findings.extend(apply_keras_rules(records, anomalies, policy, ctx))


def _scan_zip(
    path: str,
    handle,
    policy: Policy,
    limits: ScanLimits,
    findings: list[Finding],
    errors: list[ScanError],
) -> None:
    try:
        entries = containers.list_entries(handle)
    except containers.FormatError as exc:
        errors.append(ScanError(exc.kind, "", exc.message))
        findings.append(
            Finding(
                rule_id="FORMAT_PARSE_ERROR",
                severity=Severity.LOW,
                file=path,
                message=f"archive could not be read: {exc.message}",
            )
        )
        return
    for entry in entries:
        if entry.suspicious_path:
            findings.append(
                Finding(
                    rule_id="ARCHIVE_PATH_TRAVERSAL",
                    severity=Severity.HIGH,
                    file=path,
                    message=f"member path {entry.path!r} escapes the extraction root",
                    evidence=entry.path,
                    entry=entry.path,
                )
            )
        if entry.encrypted or entry.method.startswith("unsupported"):
            detail = "encrypted" if entry.encrypted else entry.method
            findings.append(
                Finding(
                    rule_id="ARCHIVE_UNSUPPORTED_METHOD",
                    severity=Severity.MEDIUM,
                    file=path,
                    message=f"member {entry.path!r} is not inspectable ({detail})",
                    entry=entry.path,
                )
            )
    payload_errors: list[containers.FormatError] = []
    payloads = containers.find_pickle_payloads(
        entries, handle, cap=limits.entry_cap, errors=payload_errors
    )
    for exc in payload_errors:
        errors.append(ScanError(exc.kind, "", exc.message))
        findings.append(
            Finding(
                rule_id="FORMAT_PARSE_ERROR",
                severity=Severity.LOW,
                file=path,
                message=f"archive member could not be read: {exc.message}",
            )
        )
    for entry, data in payloads:
        ctx = FileContext(path=path, entry=entry.path)
        _scan_pickle_bytes(data, ctx, policy, limits, findings, errors)
    for entry in entries:
        if entry.path.rsplit("/", 1)[-1] != "config.json":
            continue
        ctx = FileContext(path=path, entry=entry.path)
        try:
            config_bytes = containers.read_entry(handle, entry, limits.config_cap)
        except containers.FormatError as exc:
            errors.append(ScanError(exc.kind, entry.path, exc.message))
            continue
        _scan_keras_config(
            config_bytes.decode("utf-8", "replace"), ctx, policy, findings, errors
        )


def _scan_hdf5(
    path: str,
    handle,
    policy: Policy,
    limits: ScanLimits,
    findings: list[Finding],
    errors: list[ScanError],
) -> None:
    try:
        extracted = containers.extract_h5_model_config(handle)
    except containers.ConfigNotFound:
        return  # weights-only or non-model HDF5: nothing to inspect
    except containers.FormatError as exc:
        errors.append(ScanError(exc.kind, "", exc.message))
        findings.append(
            Finding(
                rule_id="FORMAT_PARSE_ERROR",
                severity=Severity.LOW,
                file=path,
                message=f"embedded model config could not be extracted: {exc.message}",
            )
        )
        return
    findings.append(
        Finding(
            rule_id="H5_HEURISTIC_USED",
            severity=Severity.INFO,
            file=path,
            message=(
                "model config recovered via attribute-scan heuristic "
                f"(bytes {extracted.byte_range[0]}..{extracted.byte_range[1]})"
            ),
            offset=extracted.byte_range[0],
        )
    )
    _scan_keras_config(extracted.json_text, FileContext(path=path), policy, findings, errors)


def scan_file(
    path: str,
    policy: Policy,
    limits: ScanLimits = DEFAULT_SCAN_LIMITS,
) -> FileReport:
    """Scan one file; IO failures become an error entry, never an exception."""
    started = time.perf_counter()
    findings: list[Finding] = []
    errors: list[ScanError] = []
    kind = "unknown"
    size = 0
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as handle:
            head = handle.read(_SNIFF_BYTES)
            detected = sniff(head, size)
            kind = detected.kind
            if kind == "pickle_stream":
                if size > limits.parse.max_stream_bytes:
                    raise disasm.LimitExceeded(0, "max_stream_bytes")
                handle.seek(0)
                data = handle.read()
                _scan_pickle_bytes(data, FileContext(path=path), policy, limits, findings, errors)
            elif kind == "zip_archive":
                _scan_zip(path, handle, policy, limits, findings, errors)
            elif kind == "hdf5":
                _scan_hdf5(path, handle, policy, limits, findings, errors)
            else:
                findings.append(
                    Finding(
                        rule_id="UNRECOGNIZED_FORMAT",
                        severity=Severity.INFO,
                        file=path,
                        message="unrecognized format; nothing scanned",
                    )
                )
    except disasm.ParseError as exc:
        errors.append(ScanError(exc.kind, f"offset {exc.offset}", exc.message))
    except OSError as exc:
        errors.append(ScanError("IOError", "", str(exc)))
        findings = []
    findings.sort(key=lambda finding: finding.sort_key())
    return FileReport(
        path=path,
        kind=kind,
        findings=findings,
        errors=errors,
        bytes_scanned=size,
        duration=time.perf_counter() - started,
    )


def _collect_files(
    root: str, follow_symlinks: bool, errors: list[tuple[str, str]]
) -> list[str]:
    collected: list[str] = []

    def on_error(exc: OSError) -> None:
        errors.append((getattr(exc, "filename", root) or root, str(exc)))

    for dirpath, _dirnames, filenames in os.walk(
        root, followlinks=follow_symlinks, onerror=on_error
    ):
        for name in filenames:
            full = os.path.join(dirpath, name)
            if not follow_symlinks and os.path.islink(full):
                continue
            collected.append(full)
    return collected


def scan_paths(
    paths: list[str],
    policy: Policy,
    limits: ScanLimits = DEFAULT_SCAN_LIMITS,
    jobs: int = 1,
    follow_symlinks: bool = False,
    threshold: Severity = Severity.HIGH,
) -> ScanReport:
    """Scan files and directory trees into one deterministic report."""
    walk_errors: list[tuple[str, str]] = []
    files: list[str] = []
    for path in paths:
        if os.path.isdir(path):
            files.extend(_collect_files(path, follow_symlinks, walk_errors))
        elif os.path.exists(path):
            files.append(path)
        else:
            walk_errors.append((path, "no such file or directory"))
    files = sorted(set(files))
    if jobs > 1 and len(files) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(lambda f: scan_file(f, policy, limits), files))
    else:
        reports = [scan_file(path, policy, limits) for path in files]
    for bad_path, message in walk_errors:
        reports.append(
            FileReport(
                path=bad_path,
                kind="unknown",
                errors=[ScanError("IOError", "", message)],
            )
        )
    reports.sort(key=lambda r: r.path)
    return ScanReport(
        tool_version=TOOL_VERSION,
        policy_digest=policy.digest(),
        files=reports,
        exit_severity_threshold=threshold,
    )


def scan_tree(
    root_path: str,
    policy: Policy,
    limits: ScanLimits = DEFAULT_SCAN_LIMITS,
    parallelism: int = 1,
    follow_symlinks: bool = False,
    threshold: Severity = Severity.HIGH,
) -> ScanReport:
    """Recursive scan of one directory (symlinks skipped by default)."""
    return scan_paths(
        [root_path],
        policy,
        limits,
        jobs=parallelism,
        follow_symlinks=follow_symlinks,
        threshold=threshold,
    )


def verify_paths(
    paths: list[str],
    manifest: IntegrityManifest,
    policy: Policy,
    threshold: Severity = Severity.HIGH,
) -> ScanReport:
    """Digest-check files against an integrity manifest, as a report."""
    reports: list[FileReport] = []
    for path in sorted(set(paths)):
        findings: list[Finding] = []
        errors: list[ScanError] = []
        try:
            with open(path, "rb") as handle:
                outcome = verify_integrity(handle, path, manifest)
            if outcome.status == "mismatch":
                findings.append(
                    Finding(
                        rule_id="INTEGRITY_MISMATCH",
                        severity=Severity.CRITICAL,
                        file=path,
                        message=(
                            f"digest mismatch: manifest has {outcome.expected}, "
                            f"file is {outcome.actual}"
                        ),
                    )
                )
            elif outcome.status == "not-listed":
                findings.append(
                    Finding(
                        rule_id="INTEGRITY_MISMATCH",
                        severity=Severity.LOW,
                        file=path,
                        message="file is not listed in the integrity manifest",
                    )
                )
        except OSError as exc:
            errors.append(ScanError("IOError", "", str(exc)))
        reports.append(FileReport(path=path, kind="unknown", findings=findings, errors=errors))
    return ScanReport(
        tool_version=TOOL_VERSION,
        policy_digest=policy.digest(),
        files=reports,
        exit_severity_threshold=threshold,
    )
