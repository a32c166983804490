"""Command line entry points: scan, disasm, forge, verify."""

from __future__ import annotations

import argparse
import os
import sys

from . import disasm
from .forge import DEFAULT_MARKER, ForgeError, emit_corpus
from .policy import IntegrityManifest, Policy, Severity, default_policy, load_policy_file
from .report import exit_code, render
from .scanner import DEFAULT_SCAN_LIMITS, ScanLimits, scan_paths, verify_paths

EXIT_OK = 0
EXIT_OPERATIONAL = 2
EXIT_FINDINGS = 3

POLICY_ENV_VAR = "MODELSENTRY_POLICY"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modelsentry",
        description="Static security scanner for serialized ML model files.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    scan = sub.add_parser("scan", help="scan files or directory trees")
    scan.add_argument("paths", nargs="+", metavar="PATH")
    scan.add_argument("--policy", help="policy JSON file (extends the built-in defaults)")
    scan.add_argument("--format", choices=("text", "json", "sarif"), default="text")
    scan.add_argument("--out", help="write the report here instead of stdout")
    scan.add_argument(
        "--threshold",
        default="HIGH",
        help="minimum severity that makes the exit code nonzero (default HIGH)",
    )
    scan.add_argument(
        "--max-entry-bytes",
        type=int,
        default=DEFAULT_SCAN_LIMITS.entry_cap,
        help="decompression cap per archive entry",
    )
    scan.add_argument("--follow-symlinks", action="store_true")
    scan.add_argument("--jobs", type=int, default=1, help="parallel file scans")

    dis = sub.add_parser("disasm", help="print one instruction per line")
    dis.add_argument("file", metavar="FILE")

    forge = sub.add_parser("forge", help="write the ground-truth fixture corpus")
    forge.add_argument("--out", required=True, metavar="DIR")
    forge.add_argument("--seed", type=int, default=0)
    forge.add_argument("--marker", default=DEFAULT_MARKER, help="inert payload command")

    verify = sub.add_parser("verify", help="check files against an integrity manifest")
    verify.add_argument("--manifest", required=True, metavar="FILE")
    verify.add_argument("paths", nargs="+", metavar="PATH")
    verify.add_argument("--format", choices=("text", "json", "sarif"), default="text")
    verify.add_argument("--out", help="write the report here instead of stdout")
    verify.add_argument("--threshold", default="HIGH")
    return parser


def _load_policy(policy_arg: str | None) -> Policy:
    path = policy_arg or os.environ.get(POLICY_ENV_VAR)
    if path:
        return load_policy_file(path)
    return default_policy()


def _emit(data: bytes, out: str | None) -> None:
    if out:
        with open(out, "wb") as handle:
            handle.write(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()


def _cmd_scan(args: argparse.Namespace) -> int:
    try:
        policy = _load_policy(args.policy)
        threshold = Severity.parse(args.threshold)
    except (OSError, ValueError) as exc:
        print(f"modelsentry: {exc}", file=sys.stderr)
        return EXIT_OPERATIONAL
    limits = ScanLimits(entry_cap=args.max_entry_bytes)
    report = scan_paths(
        args.paths,
        policy,
        limits,
        jobs=max(1, args.jobs),
        follow_symlinks=args.follow_symlinks,
        threshold=threshold,
    )
    _emit(render(report, args.format), args.out)
    return exit_code(report)


def _cmd_disasm(args: argparse.Namespace) -> int:
    try:
        with open(args.file, "rb") as handle:
            data = handle.read()
    except OSError as exc:
        print(f"modelsentry: {exc}", file=sys.stderr)
        return EXIT_OPERATIONAL
    status = EXIT_OK
    try:
        for program in disasm.iter_programs(data):
            for instruction in program.instructions:
                print(disasm.format_instruction(instruction))
            if program.trailing_bytes:
                print(f"# {program.trailing_bytes} trailing byte(s)")
    except disasm.ParseError as exc:
        print(f"modelsentry: parse error: {exc}", file=sys.stderr)
        status = EXIT_OPERATIONAL
    return status


def _cmd_forge(args: argparse.Namespace) -> int:
    try:
        manifest = emit_corpus(args.out, seed=args.seed, payload_marker=args.marker)
    except (OSError, ForgeError) as exc:
        print(f"modelsentry: forge failed: {exc}", file=sys.stderr)
        return EXIT_OPERATIONAL
    print(f"wrote {len(manifest.fixtures)} fixtures to {args.out}")
    return EXIT_OK


def _cmd_verify(args: argparse.Namespace) -> int:
    try:
        manifest = IntegrityManifest.load(args.manifest)
        threshold = Severity.parse(args.threshold)
        policy = default_policy()
    except (OSError, ValueError) as exc:
        print(f"modelsentry: {exc}", file=sys.stderr)
        return EXIT_OPERATIONAL
    report = verify_paths(args.paths, manifest, policy, threshold=threshold)
    _emit(render(report, args.format), args.out)
    return exit_code(report)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "scan": _cmd_scan,
        "disasm": _cmd_disasm,
        "forge": _cmd_forge,
        "verify": _cmd_verify,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
