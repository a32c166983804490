"""Policy evaluation: events and layer records in, findings out.

A Policy is an immutable table of allowed and denied (module, name)
patterns plus per-rule severities.  Patterns are exact names or a single
trailing ``*``; an exact match always beats a prefix match, and deny beats
allow on ties.  The shipped default policy denies the shell-capable
standard library surface and allows the globals that benign checkpoints
from the mainstream frameworks actually reference.

Also home to the finding catalog and the integrity-manifest checker.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import BinaryIO, Iterable

from . import absvm
from .kerascfg import ConfigAnomaly, LayerRecord


class Severity(enum.IntEnum):
    INFO = 10
    LOW = 20
    MEDIUM = 30
    HIGH = 40
    CRITICAL = 50

    @classmethod
    def parse(cls, text: str) -> "Severity":
        if not isinstance(text, str):
            raise ValueError(f"severity must be a string, got {text!r}")
        try:
            return cls[text.upper()]
        except KeyError:
            raise ValueError(f"unknown severity {text!r}") from None

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class RuleInfo:
    rule_id: str
    default_severity: Severity
    description: str


RULE_CATALOG: dict[str, RuleInfo] = {
    rule.rule_id: rule
    for rule in (
        RuleInfo(
            "PICKLE_DANGEROUS_GLOBAL",
            Severity.CRITICAL,
            "Pickle stream resolves a module global that is denied by policy or unknown.",
        ),
        RuleInfo(
            "PICKLE_CALL",
            Severity.CRITICAL,
            "Pickle stream invokes a callable whose chain root is denied or unknown.",
        ),
        RuleInfo(
            "PICKLE_RESIDUAL_STACK",
            Severity.HIGH,
            "Objects remain on the stack after STOP: a payload was built before the visible root.",
        ),
        RuleInfo(
            "PICKLE_DYNAMIC_GLOBAL",
            Severity.HIGH,
            "STACK_GLOBAL import target is computed at load time instead of written literally.",
        ),
        RuleInfo(
            "PICKLE_TRAILING_DATA",
            Severity.INFO,
            "Bytes follow the final STOP opcode.",
        ),
        RuleInfo(
            "PICKLE_OOB_BUFFER",
            Severity.INFO,
            "Stream requests out-of-band buffers (protocol 5).",
        ),
        RuleInfo(
            "PICKLE_FRAME_MISMATCH",
            Severity.INFO,
            "FRAME length does not line up with instruction boundaries.",
        ),
        RuleInfo(
            "KERAS_LAMBDA_CODE",
            Severity.HIGH,
            "Lambda layer in the model config; arbitrary code runs on load or predict.",
        ),
        RuleInfo(
            "KERAS_LAMBDA_REF",
            Severity.MEDIUM,
            "Lambda layer referencing a function by name; resolution happens at load time.",
        ),
        RuleInfo(
            "KERAS_CUSTOM_LAYER",
            Severity.HIGH,
            "Custom-computation layer class flagged by policy.",
        ),
        RuleInfo(
            "KERAS_MALFORMED_CONFIG",
            Severity.LOW,
            "Model config contains nodes the analyzer could not interpret.",
        ),
        RuleInfo(
            "ARCHIVE_PATH_TRAVERSAL",
            Severity.HIGH,
            "Archive member path escapes the extraction root.",
        ),
        RuleInfo(
            "ARCHIVE_UNSUPPORTED_METHOD",
            Severity.MEDIUM,
            "Archive member is encrypted or uses an exotic compression method.",
        ),
        RuleInfo(
            "H5_HEURISTIC_USED",
            Severity.INFO,
            "Model config recovered via the bounded HDF5 heuristic, not a full parse.",
        ),
        RuleInfo(
            "INTEGRITY_MISMATCH",
            Severity.CRITICAL,
            "File digest does not match the integrity manifest (or the file is unlisted).",
        ),
        RuleInfo(
            "FORMAT_PARSE_ERROR",
            Severity.LOW,
            "A stream or entry inside the file could not be parsed.",
        ),
        RuleInfo(
            "UNRECOGNIZED_FORMAT",
            Severity.INFO,
            "File does not look like any supported model format.",
        ),
    )
}


@dataclass(frozen=True)
class Finding:
    rule_id: str
    severity: Severity
    file: str
    message: str
    evidence: str = ""
    entry: str | None = None
    offset: int | None = None
    json_path: str | None = None

    @property
    def locus(self) -> str:
        parts: list[str] = []
        if self.entry:
            parts.append(self.entry)
        if self.offset is not None:
            parts.append(f"offset {self.offset}")
        if self.json_path:
            parts.append(self.json_path)
        return ":".join(parts) if parts else "-"

    def sort_key(self) -> tuple:
        return (
            self.entry or "",
            self.offset if self.offset is not None else -1,
            self.json_path or "",
            self.rule_id,
            self.message,
        )


@dataclass(frozen=True)
class FileContext:
    path: str
    entry: str | None = None


# ---------------------------------------------------------------------------
# Policy


@dataclass(frozen=True)
class DenyEntry:
    module: str
    name: str
    severity: Severity = Severity.CRITICAL


@dataclass(frozen=True)
class AllowEntry:
    module: str
    name: str


@dataclass(frozen=True)
class Disposition:
    verdict: str  # "deny" | "allow" | "unknown"
    severity: Severity | None = None


@dataclass(frozen=True)
class Policy:
    deny: tuple[DenyEntry, ...] = ()
    allow: tuple[AllowEntry, ...] = ()
    unknown_global_severity: Severity = Severity.MEDIUM
    lambda_severity: Severity = Severity.HIGH
    lambda_ref_severity: Severity = Severity.MEDIUM
    residual_stack_severity: Severity = Severity.HIGH
    dynamic_global_severity: Severity = Severity.HIGH
    extra_custom_layer_classes: tuple[str, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "deny": [
                {"module": d.module, "name": d.name, "severity": d.severity.name}
                for d in self.deny
            ],
            "allow": [{"module": a.module, "name": a.name} for a in self.allow],
            "severities": {
                "unknown_global": self.unknown_global_severity.name,
                "lambda_code": self.lambda_severity.name,
                "lambda_ref": self.lambda_ref_severity.name,
                "residual_stack": self.residual_stack_severity.name,
                "dynamic_global": self.dynamic_global_severity.name,
            },
            "custom_layer_classes": list(self.extra_custom_layer_classes),
        }

    def digest(self) -> str:
        canonical = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _pattern_matches(pattern: str, text: str) -> bool:
    if pattern.endswith("*"):
        return text.startswith(pattern[:-1])
    return pattern == text


def _specificity(module_pattern: str, name_pattern: str) -> tuple[int, int]:
    exact = (not module_pattern.endswith("*")) + (not name_pattern.endswith("*"))
    length = len(module_pattern.rstrip("*")) + len(name_pattern.rstrip("*"))
    return (exact, length)


def classify_global(
    module: str, name: str, policy: Policy
) -> tuple[Disposition, str | None]:
    """Deterministic precedence: exact deny > exact allow > prefix deny >
    prefix allow > Unknown; within a tier, longer patterns win; deny wins
    exact ties."""
    best_deny: tuple[tuple[int, int], DenyEntry] | None = None
    for entry in policy.deny:
        if _pattern_matches(entry.module, module) and _pattern_matches(entry.name, name):
            spec = _specificity(entry.module, entry.name)
            if best_deny is None or spec > best_deny[0]:
                best_deny = (spec, entry)
    best_allow: tuple[tuple[int, int], AllowEntry] | None = None
    for entry in policy.allow:
        if _pattern_matches(entry.module, module) and _pattern_matches(entry.name, name):
            spec = _specificity(entry.module, entry.name)
            if best_allow is None or spec > best_allow[0]:
                best_allow = (spec, entry)
    if best_deny is not None and (best_allow is None or best_deny[0] >= best_allow[0]):
        entry = best_deny[1]
        return (
            Disposition("deny", entry.severity),
            f"{entry.module}.{entry.name}",
        )
    if best_allow is not None:
        entry = best_allow[1]
        return (Disposition("allow"), f"{entry.module}.{entry.name}")
    return (Disposition("unknown"), None)


_DEFAULT_POLICY: Policy | None = None


def _pattern_entry(item: object, kind: str) -> tuple[str, str]:
    if (
        not isinstance(item, dict)
        or not isinstance(item.get("module"), str)
        or not isinstance(item.get("name"), str)
    ):
        raise ValueError(f"{kind} entries need string 'module' and 'name' fields, got {item!r}")
    return item["module"], item["name"]


def _policy_from_dict(raw: dict, base: Policy | None = None) -> Policy:
    policy = base if base is not None else Policy()
    for key in ("deny", "allow"):
        if not isinstance(raw.get(key, []), list):
            raise ValueError(f"'{key}' must be a list of entries")
    deny = list(policy.deny)
    for item in raw.get("deny", []):
        module, name = _pattern_entry(item, "deny")
        severity = Severity.parse(item.get("severity", "CRITICAL"))
        deny.append(DenyEntry(module, name, severity))
    allow = list(policy.allow)
    for item in raw.get("allow", []):
        module, name = _pattern_entry(item, "allow")
        allow.append(AllowEntry(module, name))
    severities = raw.get("severities", {})
    if not isinstance(severities, dict):
        raise ValueError("'severities' must be an object")
    custom_raw = raw.get("custom_layer_classes", [])
    if not isinstance(custom_raw, list) or not all(isinstance(c, str) for c in custom_raw):
        raise ValueError("'custom_layer_classes' must be a list of strings")
    custom = tuple(policy.extra_custom_layer_classes) + tuple(custom_raw)

    def sev(key: str, fallback: Severity) -> Severity:
        return Severity.parse(severities[key]) if key in severities else fallback

    return replace(
        policy,
        deny=tuple(deny),
        allow=tuple(allow),
        unknown_global_severity=sev("unknown_global", policy.unknown_global_severity),
        lambda_severity=sev("lambda_code", policy.lambda_severity),
        lambda_ref_severity=sev("lambda_ref", policy.lambda_ref_severity),
        residual_stack_severity=sev("residual_stack", policy.residual_stack_severity),
        dynamic_global_severity=sev("dynamic_global", policy.dynamic_global_severity),
        extra_custom_layer_classes=custom,
    )


def default_policy() -> Policy:
    """The shipped policy (loaded once from the packaged data file)."""
    global _DEFAULT_POLICY
    if _DEFAULT_POLICY is None:
        raw = json.loads(
            resources.files("modelsentry").joinpath("data/default_policy.json").read_text("utf-8")
        )
        _DEFAULT_POLICY = _policy_from_dict(raw, base=Policy())
    return _DEFAULT_POLICY


def load_policy_file(path: str) -> Policy:
    """Load a user policy file; its entries extend the shipped defaults."""
    with open(path, "r", encoding="utf-8") as handle:
        raw = json.load(handle)
    if not isinstance(raw, dict):
        raise ValueError("policy file must contain a JSON object")
    return _policy_from_dict(raw, base=default_policy())


# ---------------------------------------------------------------------------
# Rule application


def _global_finding(
    module: str, name: str, offset: int, policy: Policy, ctx: FileContext
) -> Finding | None:
    disposition, pattern = classify_global(module, name, policy)
    if disposition.verdict == "allow":
        return None
    if disposition.verdict == "deny":
        severity = disposition.severity or Severity.CRITICAL
        message = f"resolves denied global {module}.{name} (policy entry {pattern})"
    else:
        severity = policy.unknown_global_severity
        message = f"resolves global {module}.{name} not present in the allowlist"
    return Finding(
        rule_id="PICKLE_DANGEROUS_GLOBAL",
        severity=severity,
        file=ctx.path,
        message=message,
        evidence=f"{module}.{name}",
        entry=ctx.entry,
        offset=offset,
    )


def _call_severity(
    roots: list[tuple[str, str]], policy: Policy
) -> tuple[Severity | None, str]:
    """Severity for a CallMade event given its chain roots; None means allowed."""
    if not roots:
        return (max(policy.unknown_global_severity, Severity.MEDIUM), "unresolvable callee")
    worst: Severity | None = None
    label = ""
    for module, name in roots:
        if (module, name) == ("<dynamic>", "<dynamic>"):
            severity: Severity | None = max(policy.dynamic_global_severity, Severity.MEDIUM)
            text = "dynamically computed callee"
        else:
            disposition, _ = classify_global(module, name, policy)
            if disposition.verdict == "allow":
                continue
            if disposition.verdict == "deny":
                severity = max(disposition.severity or Severity.CRITICAL, Severity.MEDIUM)
            else:
                severity = max(policy.unknown_global_severity, Severity.MEDIUM)
            text = f"{module}.{name}"
        if worst is None or severity > worst:
            worst = severity
            label = text
    return (worst, label)


def apply_rules(
    events: list[absvm.SecurityEvent],
    call_roots: list[list[tuple[str, str]]],
    policy: Policy,
    file_context: FileContext,
) -> list[Finding]:
    """Map one evaluated program's events to findings, in event order."""
    findings: list[Finding] = []
    ctx = file_context
    for event, roots in zip(events, call_roots):
        if isinstance(event, absvm.GlobalResolved):
            finding = _global_finding(event.module, event.name, event.at_offset, policy, ctx)
            if finding is not None:
                findings.append(finding)
        elif isinstance(event, absvm.DynamicGlobal):
            findings.append(
                Finding(
                    rule_id="PICKLE_DYNAMIC_GLOBAL",
                    severity=policy.dynamic_global_severity,
                    file=ctx.path,
                    message="import target is computed at load time, not written literally",
                    entry=ctx.entry,
                    offset=event.at_offset,
                )
            )
        elif isinstance(event, absvm.CallMade):
            severity, label = _call_severity(roots, policy)
            if severity is not None:
                argc = "?" if event.argc is None else str(event.argc)
                findings.append(
                    Finding(
                        rule_id="PICKLE_CALL",
                        severity=severity,
                        file=ctx.path,
                        message=f"load-time call to {label} with {argc} argument(s)",
                        evidence=event.arg_summary,
                        entry=ctx.entry,
                        offset=event.at_offset,
                    )
                )
        elif isinstance(event, absvm.ResidualStack):
            findings.append(
                Finding(
                    rule_id="PICKLE_RESIDUAL_STACK",
                    severity=policy.residual_stack_severity,
                    file=ctx.path,
                    message=(
                        f"{event.depth} value(s) left on the stack after STOP; "
                        "an injected payload was built before the visible root"
                    ),
                    entry=ctx.entry,
                    offset=event.at_offset,
                )
            )
        elif isinstance(event, absvm.TrailingData):
            findings.append(
                Finding(
                    rule_id="PICKLE_TRAILING_DATA",
                    severity=Severity.INFO,
                    file=ctx.path,
                    message=f"{event.byte_count} byte(s) after the final STOP",
                    entry=ctx.entry,
                    offset=event.at_offset,
                )
            )
        elif isinstance(event, absvm.OutOfBandBuffer):
            findings.append(
                Finding(
                    rule_id="PICKLE_OOB_BUFFER",
                    severity=Severity.INFO,
                    file=ctx.path,
                    message="stream expects out-of-band buffers",
                    entry=ctx.entry,
                    offset=event.at_offset,
                )
            )
        elif isinstance(event, absvm.FrameMismatch):
            findings.append(
                Finding(
                    rule_id="PICKLE_FRAME_MISMATCH",
                    severity=Severity.INFO,
                    file=ctx.path,
                    message="FRAME length does not match instruction boundaries",
                    entry=ctx.entry,
                    offset=event.at_offset,
                )
            )
        # StateBuilt / PersistentId / ExtensionUsed are context, not findings.
    return findings


def apply_keras_rules(
    records: Iterable[LayerRecord],
    anomalies: Iterable[ConfigAnomaly],
    policy: Policy,
    file_context: FileContext,
) -> list[Finding]:
    """Findings for flagged layers and config anomalies."""
    findings: list[Finding] = []
    ctx = file_context
    custom = set(policy.extra_custom_layer_classes)
    for record in records:
        label = record.layer_name or "<unnamed>"
        if record.class_name == "Lambda":
            payload = record.payload
            if payload is not None and payload.encoding == "reference-by-name":
                findings.append(
                    Finding(
                        rule_id="KERAS_LAMBDA_REF",
                        severity=policy.lambda_ref_severity,
                        file=ctx.path,
                        message=f"Lambda layer {label} references function {payload.preview!r} by name",
                        evidence=f"function={payload.preview}",
                        entry=ctx.entry,
                        json_path=record.json_path,
                    )
                )
            else:
                if payload is None:
                    detail = "no decodable code payload"
                    evidence = ""
                else:
                    detail = f"{payload.decoded_length} bytes of serialized code"
                    evidence = f"sha256={payload.digest} preview={payload.preview}"
                findings.append(
                    Finding(
                        rule_id="KERAS_LAMBDA_CODE",
                        severity=policy.lambda_severity,
                        file=ctx.path,
                        message=f"Lambda layer {label} embeds executable code ({detail})",
                        evidence=evidence,
                        entry=ctx.entry,
                        json_path=record.json_path,
                    )
                )
        elif record.class_name in custom:
            findings.append(
                Finding(
                    rule_id="KERAS_CUSTOM_LAYER",
                    severity=policy.lambda_severity,
                    file=ctx.path,
                    message=f"custom-computation layer {record.class_name} ({label}) flagged by policy",
                    entry=ctx.entry,
                    json_path=record.json_path,
                )
            )
    for anomaly in anomalies:
        findings.append(
            Finding(
                rule_id="KERAS_MALFORMED_CONFIG",
                severity=Severity.LOW,
                file=ctx.path,
                message=f"{anomaly.kind}: {anomaly.message}",
                entry=ctx.entry,
                json_path=anomaly.json_path or None,
            )
        )
    return findings


# ---------------------------------------------------------------------------
# Integrity manifests


_DIGEST_PREFIX = "sha256:"


@dataclass(frozen=True)
class IntegrityManifest:
    entries: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "IntegrityManifest":
        entries: dict[str, str] = {}
        for path, digest in raw.items():
            if not isinstance(digest, str) or not digest.startswith(_DIGEST_PREFIX):
                raise ValueError(f"manifest entry for {path!r} lacks a sha256: prefix")
            body = digest[len(_DIGEST_PREFIX):]
            if len(body) != 64 or body != body.lower() or any(
                c not in "0123456789abcdef" for c in body
            ):
                raise ValueError(f"manifest entry for {path!r} is not lowercase sha256 hex")
            entries[path] = digest
        return cls(entries)

    @classmethod
    def load(cls, path: str) -> "IntegrityManifest":
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
        if not isinstance(raw, dict):
            raise ValueError("integrity manifest must be a JSON object")
        return cls.from_dict(raw)


@dataclass(frozen=True)
class IntegrityResult:
    status: str  # "verified" | "mismatch" | "not-listed"
    expected: str | None = None
    actual: str | None = None


def stream_digest(handle: BinaryIO) -> str:
    hasher = hashlib.sha256()
    while True:
        chunk = handle.read(1 << 20)
        if not chunk:
            break
        hasher.update(chunk)
    return _DIGEST_PREFIX + hasher.hexdigest()


def file_digest(path: str) -> str:
    with open(path, "rb") as handle:
        return stream_digest(handle)


def verify_integrity(handle: BinaryIO, path: str, manifest: IntegrityManifest) -> IntegrityResult:
    """Stream the file through the declared digest; constant memory."""
    expected = manifest.entries.get(path)
    if expected is None:
        return IntegrityResult("not-listed")
    actual = stream_digest(handle)
    if actual == expected:
        return IntegrityResult("verified", expected, actual)
    return IntegrityResult("mismatch", expected, actual)
