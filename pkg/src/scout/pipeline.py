"""Workspace layout and end-to-end orchestration used by the CLI.

The workspace (manifest, ledger, run store, reports, config) always lives
outside the evidence root; evidence is only ever opened for reading.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

from .config import ScoutConfig
from .errors import EmptyTranscript, ScoutError
from .extract_media import prepare_image, prepare_video, transcribe_audio
from .extract_pcap import parse_pcap, render_packets
from .extract_text import (
    RuleFlag,
    batch_emails,
    extract_docx,
    metadata_rule_flags,
    parse_eml,
    parse_mbox,
    strip_html,
    unprocessable_flag,
)
from .gateway import (
    CONTEXT_SAFETY_FACTOR,
    ChatRequest,
    DEFAULT_MAX_CONTEXT_TOKENS,
    Gateway,
    TextChunk,
    estimate_tokens,
    pack_lines,
)
from .ingest import (
    CustodyAction,
    CustodyLedger,
    EvidenceItem,
    EvidenceKind,
    Manifest,
    Mismatch,
    VerifyOutcome,
    ledger_verify,
    load_manifest,
    save_manifest,
    verify_untouched,
    walk_evidence,
)
from .report import CorpusStats, Report, build_report, render_report
from .timeutils import Clock, utc_now
from .triage import (
    AnalysisRun,
    ExtractionResult,
    PriorityEntry,
    analyze_evidence,
    expected_run_ids,
    extraction_units,
    load_run,
    rank_corpus,
    score_evidence,
    system_prompt,
)

log = logging.getLogger(__name__)

# Headroom for the user-message wrapper around each chunk.
_PROMPT_MARGIN_TOKENS = 64


@dataclass(frozen=True)
class Workspace:
    root: Path

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    @property
    def ledger_path(self) -> Path:
        return self.root / "ledger.jsonl"

    @property
    def runs_dir(self) -> Path:
        return self.root / "runs"

    @property
    def raw_capture_dir(self) -> Path:
        return self.root / "runs" / "raw"

    @property
    def extractions_dir(self) -> Path:
        return self.root / "runs" / "extractions"

    @property
    def report_json_path(self) -> Path:
        return self.root / "report.json"

    @property
    def report_md_path(self) -> Path:
        return self.root / "report.md"

    @property
    def config_path(self) -> Path:
        return self.root / "config"

    def ensure(self) -> None:
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self.extractions_dir.mkdir(parents=True, exist_ok=True)


def check_workspace_placement(workspace_root: Path, evidence_root: Path) -> None:
    """Refuse layouts where one tree could contaminate the other."""
    ws = workspace_root.resolve()
    ev = evidence_root.resolve()
    if ws == ev or ev in ws.parents:
        raise ValueError(f"workspace {ws} must not live inside the evidence root {ev}")
    if ws in ev.parents:
        raise ValueError(f"evidence root {ev} must not live inside the workspace {ws}")


# --- scan -------------------------------------------------------------------

def scan(workspace: Workspace, evidence_root: Path, case_ref: str = "",
         clock: Clock = utc_now, workers: int = 4) -> Manifest:
    check_workspace_placement(workspace.root, evidence_root)
    workspace.ensure()
    ledger = CustodyLedger(workspace.ledger_path, clock=clock)
    manifest = walk_evidence(evidence_root, ledger, case_ref=case_ref,
                             clock=clock, workers=workers)
    save_manifest(manifest, workspace.manifest_path)
    return manifest


# --- extraction ---------------------------------------------------------------

def chunk_budget(kind: EvidenceKind, cfg: ScoutConfig) -> int:
    """Token budget per chunk: smallest selected window minus prompt overhead."""
    overhead = estimate_tokens(system_prompt(kind, cfg.case)) + _PROMPT_MARGIN_TOKENS
    profiles = cfg.profiles_for_kind(kind)
    windows = [p.max_context_tokens for p in profiles] or [DEFAULT_MAX_CONTEXT_TOKENS]
    budget = math.floor(min(windows) * CONTEXT_SAFETY_FACTOR) - overhead
    if budget <= 0:
        raise ScoutError(f"context window too small for {kind.value} prompts")
    return budget


def _chunks_from_text(text: str, budget: int) -> tuple[TextChunk, ...]:
    return tuple(pack_lines(text.splitlines(keepends=True), budget))


def _render_doc(content) -> str:
    meta = content.metadata
    lines = ["[document metadata]"]
    for label, value in (
        ("created", meta.created.isoformat() if meta.created else None),
        ("modified", meta.modified.isoformat() if meta.modified else None),
        ("last_modified_by", meta.last_modified_by),
        ("author", meta.author),
        ("title", meta.title),
    ):
        lines.append(f"{label}: {value if value is not None else '(absent)'}")
    lines += ["", "[document content]", content.text]
    return "\n".join(lines)


def extract_item(evidence_root: Path, item: EvidenceItem, cfg: ScoutConfig,
                 clock: Clock = utc_now) -> ExtractionResult:
    """Route one evidence item through its kind's extractor.

    Total: every failure degrades to an extraction-failed result carrying a
    low-severity unprocessable flag, never an abort.
    """
    if item.kind is EvidenceKind.UNKNOWN:
        return ExtractionResult(evidence_id=item.id, status="skipped",
                                note=item.note or "unclassified file kind")
    path = evidence_root / item.path
    try:
        return _extract_dispatch(path, item, cfg, clock)
    except EmptyTranscript:
        return ExtractionResult(
            evidence_id=item.id, status="extraction-failed",
            rule_flags=(unprocessable_flag("transcription produced no text"),),
            note="empty transcript",
        )
    except (ScoutError, OSError) as exc:
        return ExtractionResult(
            evidence_id=item.id, status="extraction-failed",
            rule_flags=(unprocessable_flag(f"{type(exc).__name__}: {exc}"),),
            note=str(exc),
        )
    except Exception as exc:  # totality beats precision during triage
        log.exception("unexpected extraction failure for %s", item.path)
        return ExtractionResult(
            evidence_id=item.id, status="extraction-failed",
            rule_flags=(unprocessable_flag(f"unexpected {type(exc).__name__}: {exc}"),),
            note=str(exc),
        )


def _extract_dispatch(path: Path, item: EvidenceItem, cfg: ScoutConfig,
                      clock: Clock) -> ExtractionResult:
    kind = item.kind
    if kind is EvidenceKind.PCAP:
        budget = chunk_budget(kind, cfg)
        pcap = parse_pcap(path.read_bytes())
        note = pcap.truncation_note
        return ExtractionResult(evidence_id=item.id, status="ok",
                                chunks=tuple(render_packets(pcap, budget)), note=note)
    if kind is EvidenceKind.MBOX:
        budget = chunk_budget(kind, cfg)
        messages = parse_mbox(path.read_bytes())
        return ExtractionResult(evidence_id=item.id, status="ok",
                                chunks=tuple(batch_emails(messages, budget)))
    if kind is EvidenceKind.EML:
        budget = chunk_budget(kind, cfg)
        message = parse_eml(path.read_bytes())
        return ExtractionResult(evidence_id=item.id, status="ok",
                                chunks=tuple(batch_emails([message], budget)))
    if kind is EvidenceKind.DOCX:
        budget = chunk_budget(kind, cfg)
        content = extract_docx(path.read_bytes())
        flags = metadata_rule_flags(content.metadata, cfg.rules,
                                    analysis_time=clock())
        return ExtractionResult(
            evidence_id=item.id, status="ok",
            chunks=_chunks_from_text(_render_doc(content), budget),
            rule_flags=tuple(flags),
        )
    if kind is EvidenceKind.HTML:
        budget = chunk_budget(kind, cfg)
        text = strip_html(path.read_bytes().decode("utf-8", errors="replace"))
        return ExtractionResult(evidence_id=item.id, status="ok",
                                chunks=_chunks_from_text(text, budget))
    if kind is EvidenceKind.PLAIN_TEXT:
        budget = chunk_budget(kind, cfg)
        text = path.read_bytes().decode("utf-8", errors="replace")
        return ExtractionResult(evidence_id=item.id, status="ok",
                                chunks=_chunks_from_text(text, budget))
    if kind is EvidenceKind.AUDIO:
        if not cfg.asr_endpoint_url:
            return ExtractionResult(
                evidence_id=item.id, status="extraction-failed",
                rule_flags=(unprocessable_flag("no ASR endpoint configured"),),
                note="no ASR endpoint configured",
            )
        budget = chunk_budget(kind, cfg)
        transcript = transcribe_audio(path, cfg.asr_endpoint_url, cfg.asr_model)
        return ExtractionResult(evidence_id=item.id, status="ok",
                                chunks=_chunks_from_text(transcript.text, budget))
    if kind is EvidenceKind.IMAGE:
        attachment = prepare_image(path, cfg.image_max_dim)
        return ExtractionResult(evidence_id=item.id, status="ok",
                                attachments=(attachment,))
    if kind is EvidenceKind.VIDEO:
        attachments = prepare_video(path, cfg.video_max_duration_s)
        return ExtractionResult(evidence_id=item.id, status="ok",
                                attachments=tuple(attachments))
    raise ScoutError(f"no extractor for kind {kind.value}")


# --- extraction summaries (persisted alongside runs) ---------------------------

def _extraction_summary_path(workspace: Workspace, item: EvidenceItem) -> Path:
    return workspace.extractions_dir / f"{item.id}.json"


def save_extraction_summary(workspace: Workspace, item: EvidenceItem,
                            result: ExtractionResult) -> None:
    payload = {
        "evidence_id": result.evidence_id,
        "status": result.status,
        "note": result.note,
        "rule_flags": [
            {"label": f.label, "severity": f.severity,
             "rationale": f.rationale, "rule_id": f.rule_id}
            for f in result.rule_flags
        ],
        "units": [{"ref": ref, "media": media}
                  for ref, media in extraction_units(result)],
    }
    _extraction_summary_path(workspace, item).write_text(
        json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")


def load_extraction_summary(workspace: Workspace, item: EvidenceItem) -> dict | None:
    path = _extraction_summary_path(workspace, item)
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def _flags_from_summary(summary: dict) -> tuple[RuleFlag, ...]:
    return tuple(RuleFlag(**f) for f in summary.get("rule_flags", []))


def _completed_runs(workspace: Workspace, item: EvidenceItem, summary: dict,
                    profiles, runs_per_chunk: int) -> list[str] | None:
    """Run ids for the item if every expected run file exists, else None."""
    units = [(u["ref"], u["media"]) for u in summary.get("units", [])]
    run_ids = expected_run_ids(item.id, units, profiles, runs_per_chunk)
    if all((workspace.runs_dir / f"{rid}.json").exists() for rid in run_ids):
        return run_ids
    return None


# --- analyze --------------------------------------------------------------------

def analyze(workspace: Workspace, cfg: ScoutConfig, clock: Clock = utc_now,
            resume: bool = True) -> dict[str, int]:
    """Extract + prompt + score every manifest item against the mock or live
    endpoints. Returns counters for the CLI summary line."""
    manifest = load_manifest(workspace.manifest_path)
    workspace.ensure()
    ledger = CustodyLedger(workspace.ledger_path, clock=clock)
    gateway = Gateway(
        cfg.profiles,
        max_concurrent=cfg.max_concurrent,
        capture_dir=workspace.raw_capture_dir,
        backoff_base_s=cfg.backoff_base_s,
    )

    counters = {"items": 0, "runs": 0, "extraction_failed": 0, "skipped": 0}
    evidence_root = Path(manifest.evidence_root)
    for item in manifest.items:
        counters["items"] += 1
        profiles = cfg.profiles_for_kind(item.kind)
        summary = load_extraction_summary(workspace, item)
        if resume and summary is not None and summary.get("status") == "ok":
            done = _completed_runs(workspace, item, summary, profiles,
                                   cfg.runs_per_chunk)
            if done is not None:
                # Complete run set on disk: skip extraction (and any remote
                # ASR upload) entirely. Failed extractions retry instead.
                counters["runs"] += len(done)
                continue
        result = extract_item(evidence_root, item, cfg, clock)
        if summary is None or summary.get("status") != "ok":
            # First extraction, or a retry after a failed one: record it.
            save_extraction_summary(workspace, item, result)
            ledger.append(CustodyAction.EXTRACTED, item.id, item.sha256)
        else:
            # Rule flags were fixed at first successful extraction; keep them
            # stable across resumed batches (R3 depends on analysis time).
            result = ExtractionResult(
                evidence_id=result.evidence_id,
                status=result.status,
                chunks=result.chunks,
                attachments=result.attachments,
                rule_flags=_flags_from_summary(summary),
                note=result.note,
            )
        if result.status == "extraction-failed":
            counters["extraction_failed"] += 1
        if result.status == "skipped":
            counters["skipped"] += 1
            continue
        if not profiles:
            log.info("no model profiles for kind %s; %s gets rule flags only",
                     item.kind.value, item.path)
            continue
        runs = analyze_evidence(
            item, result, profiles, cfg.runs_per_chunk, gateway, cfg.case,
            ledger, workspace.runs_dir, clock=clock, resume=resume,
        )
        counters["runs"] += len(runs)
    return counters


# --- report -----------------------------------------------------------------------

def _runs_by_evidence(workspace: Workspace) -> dict[str, list[AnalysisRun]]:
    grouped: dict[str, list[AnalysisRun]] = {}
    if not workspace.runs_dir.exists():
        return grouped
    for path in sorted(workspace.runs_dir.glob("*.json")):
        try:
            run = load_run(path)
        except (ValueError, KeyError, json.JSONDecodeError):
            log.warning("ignoring unreadable run file %s", path)
            continue
        grouped.setdefault(run.evidence_id, []).append(run)
    return grouped


def assemble_entries(workspace: Workspace,
                     manifest: Manifest) -> tuple[list[PriorityEntry], CorpusStats]:
    """Score and rank every manifest item from the persisted run store.

    Identical-content files share an evidence id and therefore share runs;
    each path still gets its own ranked entry.
    """
    runs_by_evidence = _runs_by_evidence(workspace)
    entries: list[PriorityEntry] = []
    extraction_failed = 0
    unknown = 0
    analyzed_ids = set()
    for item in manifest.items:
        if item.kind is EvidenceKind.UNKNOWN:
            unknown += 1
        summary = load_extraction_summary(workspace, item) or {}
        if summary.get("status") == "extraction-failed":
            extraction_failed += 1
        flags = _flags_from_summary(summary)
        runs = sorted(runs_by_evidence.get(item.id, []), key=lambda r: r.run_id)
        if runs:
            analyzed_ids.add(item.id)
        summaries: list[str] = []
        for run in runs:
            if run.verdict.summary and run.verdict.summary not in summaries:
                summaries.append(run.verdict.summary)
        entries.append(PriorityEntry(
            evidence_id=item.id,
            path=item.path,
            kind=item.kind,
            aggregate_score=score_evidence(runs, list(flags)),
            rank=0,
            contributing_runs=tuple(r.run_id for r in runs),
            rule_flags=flags,
            verdict_summaries=tuple(summaries),
        ))
    stats = CorpusStats(
        total_items=len(manifest.items),
        analyzed=sum(1 for i in manifest.items if i.id in analyzed_ids),
        extraction_failed=extraction_failed,
        unknown_kind=unknown,
    )
    return rank_corpus(entries), stats


def write_report(workspace: Workspace, cfg: ScoutConfig,
                 clock: Clock = utc_now) -> Report:
    """Build and render the ranked report; reads the ledger, never appends."""
    manifest = load_manifest(workspace.manifest_path)
    ledger = CustodyLedger(workspace.ledger_path, clock=clock)
    entries, stats = assemble_entries(workspace, manifest)
    report = build_report(cfg.case, entries, manifest, ledger, stats, clock=clock)
    workspace.report_json_path.write_bytes(render_report(report, "json"))
    workspace.report_md_path.write_bytes(render_report(report, "md"))
    return report


# --- verify / ping ------------------------------------------------------------------

def verify(workspace: Workspace,
           clock: Clock = utc_now) -> tuple[VerifyOutcome, list[Mismatch]]:
    outcome = ledger_verify(workspace.ledger_path)
    if not outcome.ok:
        return outcome, []
    if not workspace.manifest_path.exists():
        return outcome, []
    manifest = load_manifest(workspace.manifest_path)
    ledger = CustodyLedger(workspace.ledger_path, clock=clock)
    mismatches = verify_untouched(manifest, ledger)
    return outcome, mismatches


def ping(cfg: ScoutConfig) -> dict[str, str | None]:
    """One trivial request per profile; None means reachable."""
    gateway = Gateway(cfg.profiles, max_concurrent=1,
                      backoff_base_s=cfg.backoff_base_s)
    results: dict[str, str | None] = {}
    for name in sorted(cfg.profiles):
        request = ChatRequest(profile_name=name, messages=[
            {"role": "system", "content": "Connectivity check."},
            {"role": "user", "content": "ping"},
        ])
        try:
            gateway.chat_complete(request)
            results[name] = None
        except ScoutError as exc:
            results[name] = str(exc)
    return results
