"""Command-line surface: scan, analyze, report, verify, models ping.

Exit codes: 0 success, 1 usage error, 2 verification failure (hash mismatch
or broken custody chain), 3 environment error (endpoint unreachable).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import load_config
from .errors import LedgerCorrupt, RootNotFound
from .pipeline import Workspace, analyze, ping, scan, verify, write_report
from .report import render_report

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFICATION = 2
EXIT_ENVIRONMENT = 3


def _err(message: str) -> None:
    print(f"scout: {message}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scout",
        description="Read-only digital evidence triage with local model endpoints.",
    )
    parser.add_argument("--version", action="version", version=f"scout {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress details to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_workspace(p: argparse.ArgumentParser):
        p.add_argument("--workspace", default=os.environ.get("SCOUT_WORKSPACE"),
                       help="workspace directory (default: $SCOUT_WORKSPACE)")

    p_scan = sub.add_parser("scan", help="walk, hash and register an evidence tree")
    p_scan.add_argument("evidence_root", help="directory of seized files (read-only)")
    add_workspace(p_scan)
    p_scan.add_argument("--case", default="", help="case reference recorded in the manifest")

    p_analyze = sub.add_parser("analyze", help="extract and run model triage over the manifest")
    add_workspace(p_analyze)
    p_analyze.add_argument("--runs", type=int, default=None,
                           help="repetitions per chunk (overrides config)")
    p_analyze.add_argument("--models", default=None,
                           help="comma-separated profile names to use (overrides config)")
    p_analyze.add_argument("--no-resume", action="store_true",
                           help="re-run chunks even when their run files exist")

    p_report = sub.add_parser("report", help="build the ranked priority report")
    add_workspace(p_report)
    p_report.add_argument("--format", choices=("json", "md"), default=None,
                          help="also print this rendering to stdout")

    p_verify = sub.add_parser("verify", help="verify ledger chain and evidence hashes")
    add_workspace(p_verify)

    p_models = sub.add_parser("models", help="model endpoint utilities")
    models_sub = p_models.add_subparsers(dest="models_command", required=True)
    p_ping = models_sub.add_parser("ping", help="one trivial request per profile")
    add_workspace(p_ping)

    return parser


def _require_workspace(args) -> Workspace:
    if not args.workspace:
        raise UsageError("--workspace is required (or set SCOUT_WORKSPACE)")
    return Workspace(root=Path(args.workspace))


class UsageError(Exception):
    pass


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except LedgerCorrupt as exc:
        _err(f"custody ledger failed verification: {exc}")
        return EXIT_VERIFICATION
    except RootNotFound as exc:
        _err(f"evidence root not found: {exc}")
        return EXIT_USAGE
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE


def _dispatch(args) -> int:
    if args.command == "scan":
        return _cmd_scan(args)
    if args.command == "analyze":
        return _cmd_analyze(args)
    if args.command == "report":
        return _cmd_report(args)
    if args.command == "verify":
        return _cmd_verify(args)
    if args.command == "models":
        return _cmd_models_ping(args)
    raise UsageError(f"unknown command {args.command!r}")


def _cmd_scan(args) -> int:
    workspace = _require_workspace(args)
    manifest = scan(workspace, Path(args.evidence_root), case_ref=args.case)
    _err(f"registered {len(manifest.items)} items under {manifest.evidence_root}")
    return EXIT_OK


def _cmd_analyze(args) -> int:
    workspace = _require_workspace(args)
    if not workspace.manifest_path.exists():
        raise UsageError("no manifest in workspace; run scan first")
    cfg = load_config(workspace.config_path)
    if args.runs is not None:
        if args.runs < 1:
            raise UsageError("--runs must be >= 1")
        cfg = replace(cfg, runs_per_chunk=args.runs)
    if args.models:
        cfg = cfg.restricted_to([m.strip() for m in args.models.split(",") if m.strip()])
    if not cfg.profiles:
        _err("warning: no model profiles configured; only rule flags will score")
    counters = analyze(workspace, cfg, resume=not args.no_resume)
    _err(
        f"analyzed {counters['items']} items: {counters['runs']} runs, "
        f"{counters['extraction_failed']} extraction failures, "
        f"{counters['skipped']} skipped"
    )
    return EXIT_OK


def _cmd_report(args) -> int:
    workspace = _require_workspace(args)
    if not workspace.manifest_path.exists():
        raise UsageError("no manifest in workspace; run scan first")
    cfg = load_config(workspace.config_path)
    report = write_report(workspace, cfg)
    _err(f"wrote {workspace.report_json_path} and {workspace.report_md_path} "
         f"({len(report.entries)} entries)")
    if args.format:
        sys.stdout.write(render_report(report, args.format).decode("utf-8"))
    return EXIT_OK


def _cmd_verify(args) -> int:
    workspace = _require_workspace(args)
    if not workspace.manifest_path.exists():
        raise UsageError("no manifest in workspace; run scan first")
    outcome, mismatches = verify(workspace)
    if not outcome.ok:
        _err(f"ledger broken at seq {outcome.broken_seq}: {outcome.reason}")
        return EXIT_VERIFICATION
    if mismatches:
        for m in mismatches:
            detail = "missing" if m.missing else f"sha256 {m.actual_sha256}"
            _err(f"mismatch: {m.path} expected sha256 {m.expected_sha256}, {detail}")
        return EXIT_VERIFICATION
    _err("ledger chain ok; all evidence hashes match")
    return EXIT_OK


def _cmd_models_ping(args) -> int:
    workspace = _require_workspace(args)
    cfg = load_config(workspace.config_path)
    if not cfg.profiles:
        raise UsageError("no model profiles configured in workspace config")
    results = ping(cfg)
    failures = 0
    for name, error in results.items():
        if error is None:
            print(f"{name}: ok")
        else:
            failures += 1
            print(f"{name}: UNREACHABLE ({error})")
    return EXIT_ENVIRONMENT if failures else EXIT_OK


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
