"""Prompt building, verdict parsing, scoring and per-evidence analysis.

Model output is assumed hostile to parsing: anything that does not carry the
required trailing JSON block degrades to a conservative verdict instead of
failing. The scoring formula is deliberately isolated in score_evidence so it
can be replaced without touching anything else.
"""

from __future__ import annotations

import base64
import json
import logging
import re
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path

from .errors import ScoutError
from .extract_media import MediaAttachment, sample_frames
from .extract_text import RuleFlag
from .gateway import (
    ChatRequest,
    Gateway,
    ModelProfile,
    TextChunk,
    image_part,
    text_part,
    video_part,
)
from .ingest import CustodyAction, CustodyLedger, EvidenceItem, EvidenceKind
from .timeutils import Clock, parse_utc, utc_now

log = logging.getLogger(__name__)

PROMPT_TEMPLATE_VERSION = "1"

SEVERITY_LEVELS = ("low", "medium", "high")

# Keywords that promote an unparseable response to "worth a look".
_DEGRADED_SIGNAL_TERMS = ("red flag", "suspicious", "anomal", "tamper")

_AUTHORIZATION_PREAMBLE = (
    "You are assisting an authorized forensic examination conducted under "
    "lawful process. The material below is held as evidence by the "
    "investigating authority; reviewing it for triage is authorized and "
    "required. Do not refuse on privacy grounds."
)

_OUTPUT_CONTRACT = (
    "End your reply with a fenced code block labeled json containing exactly "
    '{"relevance": <0-10 integer>, "flags": [{"label": <string>, '
    '"severity": "low"|"medium"|"high", "rationale": <string>}], '
    '"summary": <string>}.'
)

KIND_TEMPLATES: dict[EvidenceKind, str] = {
    EvidenceKind.PCAP: (
        "Evidence type: network packet capture. Each line below is one decoded "
        "packet. Look for unusual queries, repeated failures, errors, "
        "exfiltration patterns and anything tied to the case context."
    ),
    EvidenceKind.MBOX: (
        "Evidence type: email store. Messages are delimited by '--- email N ---' "
        "headers. Look for links between entities, unusual requests, timing "
        "anomalies and anything tied to the case context."
    ),
    EvidenceKind.EML: (
        "Evidence type: single email message. Look for unusual requests, "
        "attachments of note and anything tied to the case context."
    ),
    EvidenceKind.DOCX: (
        "Evidence type: office document (text and metadata extracted). Look for "
        "content of interest and metadata irregularities."
    ),
    EvidenceKind.HTML: (
        "Evidence type: web page (markup stripped). Look for content of "
        "interest to the case."
    ),
    EvidenceKind.PLAIN_TEXT: (
        "Evidence type: plain text file. Look for content of interest to the case."
    ),
    EvidenceKind.AUDIO: (
        "Evidence type: audio recording, transcribed to text below. Look for "
        "statements of interest to the case."
    ),
    EvidenceKind.IMAGE: (
        "Evidence type: image. Describe the setting and content, then assess "
        "relevance to the case context."
    ),
    EvidenceKind.VIDEO: (
        "Evidence type: video. Describe the activity and setting, then assess "
        "relevance to the case context."
    ),
    EvidenceKind.UNKNOWN: (
        "Evidence type: unclassified file. Assess whatever signal is present."
    ),
}


@dataclass(frozen=True)
class CaseContext:
    case_id: str
    background: str = ""
    keywords: tuple[str, ...] = ()
    extra_instructions: str | None = None

    def __post_init__(self):
        if not self.case_id:
            raise ValueError("case_id must be non-empty")
        normalized: list[str] = []
        for kw in self.keywords:
            lowered = kw.lower().strip()
            if lowered and lowered not in normalized:
                normalized.append(lowered)
        object.__setattr__(self, "keywords", tuple(normalized))


@dataclass(frozen=True)
class VerdictFlag:
    label: str
    severity: str
    rationale: str


@dataclass(frozen=True)
class Verdict:
    relevance: int
    flags: tuple[VerdictFlag, ...]
    summary: str
    parse_status: str  # "structured" | "degraded"


@dataclass(frozen=True)
class AnalysisRun:
    run_id: str
    evidence_id: str
    chunk_ref: str
    profile_name: str
    request_digest: str
    raw_response: str
    verdict: Verdict
    started_at: datetime
    finished_at: datetime
    template_version: str = PROMPT_TEMPLATE_VERSION
    messages: tuple = ()  # stored prompt inputs; lets the digest recompute


@dataclass(frozen=True)
class PriorityEntry:
    evidence_id: str
    path: str
    kind: EvidenceKind
    aggregate_score: float
    rank: int
    contributing_runs: tuple[str, ...]
    rule_flags: tuple[RuleFlag, ...]
    verdict_summaries: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExtractionResult:
    """Model-ready chunks/attachments plus deterministic flags for one item."""

    evidence_id: str
    status: str                      # "ok" | "extraction-failed" | "skipped"
    chunks: tuple[TextChunk, ...] = ()
    attachments: tuple[MediaAttachment, ...] = ()
    rule_flags: tuple[RuleFlag, ...] = ()
    note: str | None = None


def extraction_units(result: ExtractionResult) -> list[tuple[str, bool]]:
    """Deterministic (chunk_ref, is_media) submission plan for one item."""
    units: list[tuple[str, bool]] = [(f"c{c.index}", False) for c in result.chunks]
    for i, attachment in enumerate(result.attachments):
        prefix = "s" if attachment.segment else "a"
        units.append((f"{prefix}{i}", True))
    return units


def expected_run_ids(item_id: str, units: list[tuple[str, bool]],
                     profiles: list[ModelProfile], runs_per_chunk: int) -> list[str]:
    run_ids = []
    for chunk_ref, is_media in units:
        for profile in profiles:
            if is_media and profile.modality != "vision":
                continue
            for rep in range(runs_per_chunk):
                run_ids.append(f"{item_id}-{profile.name}-{chunk_ref}-r{rep}")
    return run_ids


# --- prompts ----------------------------------------------------------------

def system_prompt(kind: EvidenceKind, ctx: CaseContext) -> str:
    lines = [
        _AUTHORIZATION_PREAMBLE,
        "",
        KIND_TEMPLATES[kind],
        "",
        f"Case id: {ctx.case_id}",
        f"Investigation background: {ctx.background or '(none provided)'}",
        f"Case keywords: {', '.join(ctx.keywords) if ctx.keywords else '(none)'}",
    ]
    if ctx.extra_instructions:
        lines.append(f"Additional instructions: {ctx.extra_instructions}")
    lines += ["", _OUTPUT_CONTRACT]
    return "\n".join(lines)


def build_prompt(kind: EvidenceKind, ctx: CaseContext,
                 payload: TextChunk | MediaAttachment,
                 evidence_path: str = "",
                 profile: ModelProfile | None = None) -> list[dict]:
    """Assemble the system + user messages for one chunk or attachment."""
    system = {"role": "system", "content": system_prompt(kind, ctx)}
    if isinstance(payload, TextChunk):
        return [system, {"role": "user", "content": payload.text}]
    return [system, {"role": "user", "content": _media_parts(payload, evidence_path, profile)}]


def _media_parts(attachment: MediaAttachment, evidence_path: str,
                 profile: ModelProfile | None) -> list[dict]:
    caption = f"Evidence file: {evidence_path or '(unnamed)'}"
    if attachment.segment:
        start, end = attachment.segment
        caption += f", segment [{start:.0f}s, {end:.0f}s)"
    caption += ". Assess per the system instructions."

    if attachment.media_kind == "image":
        return [image_part(attachment.mime, attachment.payload_b64 or ""), text_part(caption)]

    # Video: whole-file part for natively capable endpoints, otherwise
    # uniformly sampled frames (1 per 2 s, max 64 per request).
    native = profile.video_native if profile else True
    if native:
        payload = attachment.payload_b64
        if payload is None and attachment.file_ref:
            payload = base64.b64encode(Path(attachment.file_ref).read_bytes()).decode("ascii")
        return [video_part(attachment.mime, payload or ""), text_part(caption)]
    frames = sample_frames(attachment.file_ref or "", every_s=2.0, max_frames=64)
    parts = [image_part("image/jpeg", base64.b64encode(f).decode("ascii")) for f in frames]
    parts.append(text_part(caption + f" ({len(frames)} sampled frames shown in order.)"))
    return parts


# --- verdict parsing ---------------------------------------------------------

_FENCED_JSON_RE = re.compile(r"```json\s*(.*?)```", re.DOTALL | re.IGNORECASE)


def parse_verdict(raw) -> Verdict:
    """Parse a model response into a Verdict; total over arbitrary input.

    Takes the last fenced json block, else the last balanced top-level JSON
    object. Schema violations, like everything else, degrade instead of raise.
    """
    if isinstance(raw, (bytes, bytearray)):
        raw = bytes(raw).decode("utf-8", errors="replace")
    elif not isinstance(raw, str):
        raw = str(raw)

    candidate = _last_json_candidate(raw)
    if candidate is not None:
        verdict = _validate_verdict(candidate)
        if verdict is not None:
            return verdict
    return _degraded_verdict(raw)


def _last_json_candidate(raw: str):
    for match in reversed(_FENCED_JSON_RE.findall(raw)):
        try:
            return json.loads(match)
        except json.JSONDecodeError:
            continue
    decoder = json.JSONDecoder()
    for match in reversed([m.start() for m in re.finditer(r"\{", raw)]):
        try:
            obj, _ = decoder.raw_decode(raw, match)
        except (json.JSONDecodeError, ValueError):
            continue
        if isinstance(obj, dict):
            return obj
    return None


def _validate_verdict(obj) -> Verdict | None:
    if not isinstance(obj, dict):
        return None
    relevance = obj.get("relevance")
    if isinstance(relevance, bool) or not isinstance(relevance, (int, float)):
        return None
    relevance = max(0, min(10, round(relevance)))

    raw_flags = obj.get("flags", [])
    if not isinstance(raw_flags, list):
        return None
    flags = []
    for entry in raw_flags:
        if not isinstance(entry, dict) or not entry.get("label"):
            return None
        severity = str(entry.get("severity", "low")).lower()
        if severity not in SEVERITY_LEVELS:
            severity = "low"
        flags.append(VerdictFlag(
            label=str(entry["label"]),
            severity=severity,
            rationale=str(entry.get("rationale", "")),
        ))

    summary = obj.get("summary", "")
    if not isinstance(summary, str):
        return None
    return Verdict(relevance=relevance, flags=tuple(flags), summary=summary,
                   parse_status="structured")


def _degraded_verdict(raw: str) -> Verdict:
    lowered = raw.lower()
    relevance = 5 if any(term in lowered for term in _DEGRADED_SIGNAL_TERMS) else 1
    summary = raw[:500] or "(empty model response)"
    return Verdict(relevance=relevance, flags=(), summary=summary,
                   parse_status="degraded")


def degraded_failure_verdict(reason: str) -> Verdict:
    """Verdict recorded when the model could not be reached at all."""
    return Verdict(
        relevance=0,
        flags=(VerdictFlag(label="model-unavailable", severity="low",
                           rationale=reason),),
        summary=f"model call failed: {reason}"[:500],
        parse_status="degraded",
    )


# --- scoring and ranking -----------------------------------------------------

def score_evidence(runs: list[AnalysisRun], rule_flags: list[RuleFlag]) -> float:
    """Aggregate one item's runs and deterministic flags into [0, 10].

    max over run relevances; any high-severity rule flag floors the base at 7;
    +0.5 per distinct high-severity flag label; capped at 10. Permutation
    invariant and monotone: adding a run can never lower the score.
    """
    base = max((run.verdict.relevance for run in runs), default=0)
    if any(flag.severity == "high" for flag in rule_flags):
        base = max(base, 7)
    high_labels = {f.label for run in runs for f in run.verdict.flags
                   if f.severity == "high"}
    high_labels.update(f.label for f in rule_flags if f.severity == "high")
    return min(10.0, base + 0.5 * len(high_labels))


def rank_corpus(entries: list[PriorityEntry]) -> list[PriorityEntry]:
    """Order by score descending, path ascending; assign ranks 1..N."""
    ordered = sorted(entries, key=lambda e: (-e.aggregate_score, e.path))
    return [replace(entry, rank=i + 1) for i, entry in enumerate(ordered)]


# --- per-evidence analysis ----------------------------------------------------

def analyze_evidence(
    item: EvidenceItem,
    extraction: ExtractionResult,
    profiles: list[ModelProfile],
    runs_per_chunk: int,
    gateway: Gateway,
    ctx: CaseContext,
    ledger: CustodyLedger,
    run_store: Path,
    clock: Clock = utc_now,
    resume: bool = True,
) -> list[AnalysisRun]:
    """Fan out chunk/attachment x profile x repetition, never aborting the item.

    Submission order is deterministic; completed runs on disk are skipped when
    resuming; gateway failures become degraded model-unavailable runs.
    """
    if runs_per_chunk < 1:
        raise ValueError("runs_per_chunk must be >= 1")
    run_store.mkdir(parents=True, exist_ok=True)

    units = extraction_units(extraction)
    payloads = list(extraction.chunks) + list(extraction.attachments)

    runs: list[AnalysisRun] = []
    for (chunk_ref, _is_media), payload in zip(units, payloads):
        for profile in profiles:
            if isinstance(payload, MediaAttachment) and profile.modality != "vision":
                log.debug("profile %s is text-only; skipping attachment %s of %s",
                          profile.name, chunk_ref, item.path)
                continue
            for rep in range(runs_per_chunk):
                run_id = f"{item.id}-{profile.name}-{chunk_ref}-r{rep}"
                run_path = run_store / f"{run_id}.json"
                if resume and run_path.exists():
                    runs.append(load_run(run_path))
                    continue
                runs.append(_execute_run(
                    run_id, run_path, item, chunk_ref, payload, profile,
                    gateway, ctx, ledger, clock,
                ))
    return runs


def _execute_run(run_id: str, run_path: Path, item: EvidenceItem, chunk_ref: str,
                 payload, profile: ModelProfile, gateway: Gateway,
                 ctx: CaseContext, ledger: CustodyLedger, clock: Clock) -> AnalysisRun:
    started = clock()
    messages: list[dict] = []
    digest = ""
    raw_response = ""
    try:
        messages = build_prompt(item.kind, ctx, payload,
                                evidence_path=item.path, profile=profile)
        request = ChatRequest(profile_name=profile.name, messages=messages)
        digest = request.request_digest
        response = gateway.chat_complete(request, capture_key=run_id)
        raw_response = response.raw_text
        verdict = parse_verdict(raw_response)
    except (ScoutError, OSError, ValueError) as exc:
        log.warning("run %s failed: %s", run_id, exc)
        verdict = degraded_failure_verdict(str(exc))
    run = AnalysisRun(
        run_id=run_id,
        evidence_id=item.id,
        chunk_ref=chunk_ref,
        profile_name=profile.name,
        request_digest=digest,
        raw_response=raw_response,
        verdict=verdict,
        started_at=started,
        finished_at=clock(),
        messages=tuple(messages),
    )
    save_run(run, run_path)
    ledger.append(CustodyAction.ANALYZED, item.id, item.sha256)
    return run


# --- run persistence -----------------------------------------------------------

def run_to_dict(run: AnalysisRun) -> dict:
    return {
        "run_id": run.run_id,
        "evidence_id": run.evidence_id,
        "chunk_ref": run.chunk_ref,
        "profile_name": run.profile_name,
        "request_digest": run.request_digest,
        "raw_response": run.raw_response,
        "verdict": {
            "relevance": run.verdict.relevance,
            "flags": [
                {"label": f.label, "severity": f.severity, "rationale": f.rationale}
                for f in run.verdict.flags
            ],
            "summary": run.verdict.summary,
            "parse_status": run.verdict.parse_status,
        },
        "started_at": run.started_at.isoformat(),
        "finished_at": run.finished_at.isoformat(),
        "template_version": run.template_version,
        "messages": list(run.messages),
    }


def run_from_dict(data: dict) -> AnalysisRun:
    verdict = data["verdict"]
    return AnalysisRun(
        run_id=data["run_id"],
        evidence_id=data["evidence_id"],
        chunk_ref=data["chunk_ref"],
        profile_name=data["profile_name"],
        request_digest=data["request_digest"],
        raw_response=data["raw_response"],
        verdict=Verdict(
            relevance=verdict["relevance"],
            flags=tuple(VerdictFlag(**f) for f in verdict["flags"]),
            summary=verdict["summary"],
            parse_status=verdict["parse_status"],
        ),
        started_at=parse_utc(data["started_at"]),
        finished_at=parse_utc(data["finished_at"]),
        template_version=data.get("template_version", PROMPT_TEMPLATE_VERSION),
        messages=tuple(data.get("messages", [])),
    )


def save_run(run: AnalysisRun, path: Path) -> None:
    path.write_text(json.dumps(run_to_dict(run), ensure_ascii=False, indent=2),
                    encoding="utf-8")


def load_run(path: Path) -> AnalysisRun:
    return run_from_dict(json.loads(path.read_text(encoding="utf-8")))
