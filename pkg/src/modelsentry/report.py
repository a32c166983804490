"""Report rendering: text lines, the canonical JSON schema, and SARIF 2.1.0.

The JSON form is the determinism contract: it is a pure function of the
scanned bytes, the policy, and the tool version, so timing fields never
appear in it.
"""

from __future__ import annotations

import json

from .policy import RULE_CATALOG, Severity
from .scanner import ScanReport

_SARIF_LEVELS = {
    Severity.INFO: "note",
    Severity.LOW: "note",
    Severity.MEDIUM: "warning",
    Severity.HIGH: "error",
    Severity.CRITICAL: "error",
}


def report_to_dict(report: ScanReport) -> dict:
    """The canonical JSON report structure (field names are a contract)."""
    files = []
    for file_report in report.files:
        files.append(
            {
                "path": file_report.path,
                "kind": file_report.kind,
                "findings": [
                    {
                        "rule_id": finding.rule_id,
                        "severity": finding.severity.name,
                        "locus": finding.locus,
                        "message": finding.message,
                        "evidence": finding.evidence,
                    }
                    for finding in file_report.findings
                ],
                "errors": [
                    {"kind": error.kind, "locus": error.locus, "message": error.message}
                    for error in file_report.errors
                ],
            }
        )
    return {
        "version": report.tool_version,
        "policy_digest": report.policy_digest,
        "files": files,
        "summary": report.summary(),
    }


def _render_text(report: ScanReport) -> str:
    lines: list[str] = []
    for file_report in report.files:
        for finding in file_report.findings:
            lines.append(
                f"{finding.severity.name} {finding.rule_id} "
                f"{file_report.path}:{finding.locus} {finding.message}"
            )
        for error in file_report.errors:
            lines.append(
                f"ERROR {error.kind} {file_report.path}:{error.locus or '-'} {error.message}"
            )
    summary = report.summary()
    lines.append(
        "summary: "
        + " ".join(f"{name}={summary[name]}" for name in ("critical", "high", "medium", "low", "info"))
        + f" files={len(report.files)}"
    )
    return "\n".join(lines) + "\n"


def _render_sarif(report: ScanReport) -> dict:
    rules = [
        {
            "id": rule.rule_id,
            "shortDescription": {"text": rule.description},
            "defaultConfiguration": {"level": _SARIF_LEVELS[rule.default_severity]},
        }
        for rule in sorted(RULE_CATALOG.values(), key=lambda rule: rule.rule_id)
    ]
    results = []
    for file_report in report.files:
        for finding in file_report.findings:
            location: dict = {
                "physicalLocation": {
                    "artifactLocation": {"uri": file_report.path},
                }
            }
            if finding.offset is not None:
                location["physicalLocation"]["region"] = {"byteOffset": finding.offset}
            message = finding.message
            if finding.locus != "-":
                message = f"{message} [{finding.locus}]"
            results.append(
                {
                    "ruleId": finding.rule_id,
                    "level": _SARIF_LEVELS[finding.severity],
                    "message": {"text": message},
                    "locations": [location],
                }
            )
    return {
        "$schema": "https://json.schemastore.org/sarif-2.1.0.json",
        "version": "2.1.0",
        "runs": [
            {
                "tool": {
                    "driver": {
                        "name": "modelsentry",
                        "version": report.tool_version,
                        "rules": rules,
                    }
                },
                "results": results,
            }
        ],
    }


def render(report: ScanReport, format: str = "text") -> bytes:
    """Serialize a report; formats: text, json, sarif."""
    if format == "text":
        return _render_text(report).encode("utf-8")
    if format == "json":
        return (json.dumps(report_to_dict(report), indent=2) + "\n").encode("utf-8")
    if format == "sarif":
        return (json.dumps(_render_sarif(report), indent=2) + "\n").encode("utf-8")
    raise ValueError(f"unknown report format {format!r}")


def exit_code(report: ScanReport) -> int:
    """CI contract: 3 findings at/over threshold, 2 operational errors, 0 clean."""
    worst = report.max_severity()
    if worst is not None and worst >= report.exit_severity_threshold:
        return 3
    if report.has_errors():
        return 2
    return 0
