"""Ranked triage report assembly and rendering.

The caveats block is a hard invariant: no configuration can remove the
false-negative warning or the non-evidentiary disclaimer. The report lives in
the output workspace, never in the evidence tree, and binds to the custody
chain through the ledger head hash.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime

from . import __version__
from .extract_text import RuleFlag
from .ingest import CustodyLedger, EvidenceKind, Manifest
from .timeutils import Clock, parse_utc, utc_now
from .triage import CaseContext, PriorityEntry

CAVEATS = (
    "Triage caveats (always included, cannot be disabled):\n"
    "1. False negatives are likely. A relevant file this report failed to flag "
    "is still relevant: files not flagged here must still be analyzed by the "
    "investigator.\n"
    "2. Model outputs are not evidence. Every finding requires verification "
    "with approved forensic tools before investigative or legal use; "
    "unverified AI-generated findings are inadmissible or at best hard to "
    "admit.\n"
    "3. This tool reads evidence strictly read-only; the ledger head recorded "
    "in this report binds it to the custody chain at generation time."
)


@dataclass(frozen=True)
class CorpusStats:
    total_items: int
    analyzed: int
    extraction_failed: int
    unknown_kind: int


@dataclass(frozen=True)
class Report:
    case: CaseContext
    generated_at: datetime  # the single timestamp field in the JSON rendering
    tool_version: str
    entries: tuple[PriorityEntry, ...]
    corpus_stats: CorpusStats
    caveats: str
    ledger_head: str


def build_report(case: CaseContext, entries: list[PriorityEntry],
                 manifest: Manifest, ledger: CustodyLedger,
                 stats: CorpusStats | None = None,
                 clock: Clock = utc_now) -> Report:
    """Assemble the report; regeneration from the same run store is
    byte-identical except for generated_at (ledger left untouched)."""
    if stats is None:
        stats = CorpusStats(
            total_items=len(manifest.items),
            analyzed=sum(1 for e in entries if e.contributing_runs),
            extraction_failed=0,
            unknown_kind=sum(
                1 for i in manifest.items if i.kind is EvidenceKind.UNKNOWN),
        )
    return Report(
        case=case,
        generated_at=clock(),
        tool_version=__version__,
        entries=tuple(entries),
        corpus_stats=stats,
        caveats=CAVEATS,
        ledger_head=ledger.head_hash,
    )


# --- serialization -----------------------------------------------------------

def report_to_dict(report: Report) -> dict:
    return {
        "case": {
            "case_id": report.case.case_id,
            "background": report.case.background,
            "keywords": list(report.case.keywords),
            "extra_instructions": report.case.extra_instructions,
        },
        "generated_at": report.generated_at.isoformat(),
        "tool_version": report.tool_version,
        "entries": [
            {
                "rank": e.rank,
                "evidence_id": e.evidence_id,
                "path": e.path,
                "kind": e.kind.value,
                "aggregate_score": e.aggregate_score,
                "contributing_runs": list(e.contributing_runs),
                "rule_flags": [
                    {"label": f.label, "severity": f.severity,
                     "rationale": f.rationale, "rule_id": f.rule_id}
                    for f in e.rule_flags
                ],
                "verdict_summaries": list(e.verdict_summaries),
            }
            for e in report.entries
        ],
        "corpus_stats": {
            "total_items": report.corpus_stats.total_items,
            "analyzed": report.corpus_stats.analyzed,
            "extraction_failed": report.corpus_stats.extraction_failed,
            "unknown_kind": report.corpus_stats.unknown_kind,
        },
        "caveats": report.caveats,
        "ledger_head": report.ledger_head,
    }


def report_from_dict(data: dict) -> Report:
    case = data["case"]
    return Report(
        case=CaseContext(
            case_id=case["case_id"],
            background=case["background"],
            keywords=tuple(case["keywords"]),
            extra_instructions=case["extra_instructions"],
        ),
        generated_at=parse_utc(data["generated_at"]),
        tool_version=data["tool_version"],
        entries=tuple(
            PriorityEntry(
                evidence_id=e["evidence_id"],
                path=e["path"],
                kind=EvidenceKind(e["kind"]),
                aggregate_score=e["aggregate_score"],
                rank=e["rank"],
                contributing_runs=tuple(e["contributing_runs"]),
                rule_flags=tuple(RuleFlag(**f) for f in e["rule_flags"]),
                verdict_summaries=tuple(e["verdict_summaries"]),
            )
            for e in data["entries"]
        ),
        corpus_stats=CorpusStats(**data["corpus_stats"]),
        caveats=data["caveats"],
        ledger_head=data["ledger_head"],
    )


def render_report(report: Report, fmt: str = "json") -> bytes:
    """Render to canonical JSON or investigator-facing markdown.

    Both renderings carry identical information; JSON round-trips losslessly.
    """
    if fmt == "json":
        text = json.dumps(report_to_dict(report), sort_keys=True, indent=2,
                          ensure_ascii=False) + "\n"
        return text.encode("utf-8")
    if fmt in ("md", "markdown"):
        return _render_markdown(report).encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}")


def report_from_json(data: bytes) -> Report:
    return report_from_dict(json.loads(data.decode("utf-8")))


def _flag_cell(entry: PriorityEntry) -> str:
    labels = [f"{f.label}({f.severity})" for f in entry.rule_flags]
    return ", ".join(labels) if labels else "-"


def _render_markdown(report: Report) -> str:
    stats = report.corpus_stats
    lines = [
        f"# Triage report: {report.case.case_id}",
        "",
        f"- Generated at: {report.generated_at.isoformat()}",
        f"- Tool version: {report.tool_version}",
        f"- Ledger head: `{report.ledger_head}`",
        f"- Background: {report.case.background or '(none)'}",
        f"- Keywords: {', '.join(report.case.keywords) or '(none)'}",
        f"- Extra instructions: {report.case.extra_instructions or '(none)'}",
        (f"- Corpus: {stats.total_items} items, {stats.analyzed} analyzed, "
         f"{stats.extraction_failed} extraction failures, "
         f"{stats.unknown_kind} unknown kind"),
        "",
        "## Priority order",
        "",
        "| rank | score | path | kind | flags |",
        "|------|-------|------|------|-------|",
    ]
    for entry in report.entries:
        lines.append(
            f"| {entry.rank} | {entry.aggregate_score:.1f} | {entry.path} "
            f"| {entry.kind.value} | {_flag_cell(entry)} |"
        )
    lines.append("")
    for entry in report.entries:
        lines += [
            f"## {entry.rank}. {entry.path} (score {entry.aggregate_score:.1f})",
            "",
            f"- Evidence id: `{entry.evidence_id}`",
            f"- Kind: {entry.kind.value}",
            f"- Contributing runs: {', '.join(entry.contributing_runs) or '(none)'}",
        ]
        for flag in entry.rule_flags:
            lines.append(f"- Rule flag [{flag.severity}] {flag.label}: {flag.rationale}")
        if entry.verdict_summaries:
            lines.append("- Model summaries:")
            lines.extend(f"  - {s}" for s in entry.verdict_summaries)
        lines.append("")
    lines += ["## Caveats", "", report.caveats, ""]
    return "\n".join(lines)
