"""Email stores and office documents -> model-ready text plus rule flags.

mbox splitting and the deterministic metadata rules are hand-rolled; RFC 5322
/ MIME mechanics ride on the stdlib email package.
"""

from __future__ import annotations

import email
import io
import re
import zipfile
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from datetime import datetime

from .errors import CorruptArchive, NotMbox, NotZip
from .gateway import TextChunk, estimate_tokens, pack_lines
from .timeutils import parse_utc

SEVERITIES = ("low", "medium", "high")

# Registered deterministic rules. rule_id is the stable identifier; labels are
# what investigators and the scorer see.
RULES = {
    "R1": ("metadata-anomaly", "high"),
    "R2": ("suspicious-author", "medium"),
    "R3": ("future-timestamp", "medium"),
    "R4": ("unprocessable", "low"),
}

DEFAULT_SUSPICIOUS_AUTHORS = ("Admin", "Administrator")


@dataclass(frozen=True)
class RuleFlag:
    label: str
    severity: str
    rationale: str
    rule_id: str

    def __post_init__(self):
        if self.rule_id not in RULES:
            raise ValueError(f"unregistered rule id {self.rule_id!r}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}")
        if not self.rationale:
            raise ValueError("rationale must be non-empty")


@dataclass(frozen=True)
class RuleConfig:
    suspicious_authors: tuple[str, ...] = DEFAULT_SUSPICIOUS_AUTHORS
    enabled: frozenset[str] = frozenset(RULES)


def unprocessable_flag(reason: str) -> RuleFlag:
    return RuleFlag(label="unprocessable", severity="low",
                    rationale=reason, rule_id="R4")


# --- email ----------------------------------------------------------------

@dataclass(frozen=True)
class AttachmentMeta:
    filename: str
    content_type: str
    size_bytes: int


@dataclass(frozen=True)
class EmailMessage:
    index: int
    headers: tuple[tuple[str, str], ...]  # original order, unfolded values
    body_text: str
    attachments_meta: tuple[AttachmentMeta, ...]

    def header(self, name: str) -> str | None:
        wanted = name.lower()
        for key, value in self.headers:
            if key.lower() == wanted:
                return value
        return None


_UNFOLD_RE = re.compile(r"\r?\n[ \t]+")
_MBOX_UNESCAPE_RE = re.compile(rb"^>(>*From )", re.MULTILINE)


def parse_eml(data: bytes, index: int = 0) -> EmailMessage:
    """Parse one RFC 5322 message; never raises (worst case empty body)."""
    msg = email.message_from_bytes(data)
    headers = tuple(
        (name, _UNFOLD_RE.sub(" ", value)) for name, value in msg.items()
    )
    body_text = ""
    body_is_html = False
    attachments: list[AttachmentMeta] = []
    for part in msg.walk():
        if part.get_content_maintype() == "multipart":
            continue
        filename = part.get_filename()
        disposition = (part.get("Content-Disposition") or "").lower()
        if filename or disposition.startswith("attachment"):
            attachments.append(AttachmentMeta(
                filename=filename or "",
                content_type=part.get_content_type(),
                size_bytes=len(_decoded_payload(part)),
            ))
            continue
        ctype = part.get_content_type()
        if ctype == "text/plain" and not (body_text and not body_is_html):
            body_text = _decode_text_part(part)
            body_is_html = False
        elif ctype == "text/html" and not body_text:
            body_text = strip_html(_decode_text_part(part))
            body_is_html = True
    return EmailMessage(
        index=index,
        headers=headers,
        body_text=body_text,
        attachments_meta=tuple(attachments),
    )


def _decoded_payload(part) -> bytes:
    payload = part.get_payload(decode=True)
    if payload is None:
        raw = part.get_payload()
        payload = raw.encode("utf-8", "replace") if isinstance(raw, str) else b""
    return payload


def _decode_text_part(part) -> str:
    payload = _decoded_payload(part)
    charset = part.get_content_charset() or "utf-8"
    try:
        return payload.decode(charset, errors="replace")
    except LookupError:
        return payload.decode("utf-8", errors="replace")


def parse_mbox(data: bytes) -> list[EmailMessage]:
    """Split an mbox store into messages.

    Separator lines begin "From " at file start or directly after a blank
    line; ">From " quoting inside bodies is unescaped (one ">" stripped). The
    blank line preceding a separator is store framing, not body content, so
    writer/parser round-trips are fixed points.
    """
    if not data.startswith(b"From "):
        raise NotMbox("no leading 'From ' separator")
    raw_messages: list[list[bytes]] = []
    prev_blank = True
    for line in data.splitlines(keepends=True):
        if prev_blank and line.startswith(b"From "):
            if raw_messages and raw_messages[-1] and raw_messages[-1][-1].strip() == b"":
                raw_messages[-1].pop()
            raw_messages.append([])
        else:
            raw_messages[-1].append(line)
        prev_blank = line.strip() == b""
    if raw_messages and raw_messages[-1] and raw_messages[-1][-1].strip() == b"":
        raw_messages[-1].pop()  # framing blank line after the final message
    messages = []
    for i, lines in enumerate(raw_messages):
        body = _MBOX_UNESCAPE_RE.sub(rb"\1", b"".join(lines))
        messages.append(parse_eml(body, index=i))
    return messages


def render_email(message: EmailMessage) -> str:
    lines = [f"--- email {message.index} ---"]
    for name in ("From", "To", "Cc", "Date", "Subject"):
        value = message.header(name)
        if value is not None:
            lines.append(f"{name}: {value}")
    for att in message.attachments_meta:
        lines.append(
            f"[attachment: {att.filename or '(unnamed)'} "
            f"{att.content_type} {att.size_bytes} bytes]"
        )
    lines.append("")
    lines.append(message.body_text)
    return "\n".join(lines) + "\n"


def batch_emails(messages: list[EmailMessage], budget: int) -> list[TextChunk]:
    """Greedy-pack rendered messages into chunks under the token budget.

    A single message that alone exceeds the budget is split at paragraph
    boundaries; the continuation pieces are marked "(continued)" so the plain
    per-message delimiter still appears exactly once per message.
    """
    if budget <= 0:
        raise ValueError("budget must be > 0")
    atoms: list[tuple[int, str]] = []  # (message index, piece text)
    for message in messages:
        for piece in _message_pieces(message, budget):
            atoms.append((message.index, piece))

    chunks: list[TextChunk] = []
    current: list[str] = []
    size = 0
    first = last = None

    def flush():
        if current:
            span = f"{first}-{last}" if first != last else f"{first}"
            chunks.append(TextChunk(
                text="".join(current), index=len(chunks), ref=f"emails {span}",
            ))

    max_bytes = 4 * budget
    for msg_index, piece in atoms:
        piece_bytes = len(piece.encode("utf-8"))
        if current and size + piece_bytes > max_bytes:
            flush()
            current, size, first = [], 0, None
        if first is None:
            first = msg_index
        current.append(piece)
        size += piece_bytes
        last = msg_index
    flush()
    return chunks


def _message_pieces(message: EmailMessage, budget: int) -> list[str]:
    rendered = render_email(message)
    if estimate_tokens(rendered) <= budget:
        return [rendered]
    marker = f"--- email {message.index} (continued) ---\n"
    inner_budget = max(1, budget - estimate_tokens(marker))
    paragraphs = re.split(r"(?<=\n\n)", rendered)
    pages = [c.text for c in pack_lines(paragraphs, inner_budget)]
    return [pages[0]] + [marker + page for page in pages[1:]]


# --- office documents -------------------------------------------------------

@dataclass(frozen=True)
class DocMetadata:
    created: datetime | None = None
    modified: datetime | None = None
    last_modified_by: str | None = None
    author: str | None = None
    title: str | None = None


@dataclass(frozen=True)
class DocContent:
    text: str
    metadata: DocMetadata
    format_note: str


def extract_docx(data: bytes) -> DocContent:
    """Pull body text and core properties out of an OPC word archive.

    Missing parts degrade to empty text / absent metadata, not errors.
    """
    if data[:4] != b"PK\x03\x04":
        raise NotZip("missing zip local-file magic")
    try:
        archive = zipfile.ZipFile(io.BytesIO(data))
        names = set(archive.namelist())
    except (zipfile.BadZipFile, OSError) as exc:
        raise CorruptArchive(str(exc)) from exc

    text = ""
    if "word/document.xml" in names:
        try:
            text = _document_text(archive.read("word/document.xml"))
        except (ET.ParseError, KeyError, OSError):
            text = ""
    meta = DocMetadata()
    if "docProps/core.xml" in names:
        try:
            meta = _core_properties(archive.read("docProps/core.xml"))
        except (ET.ParseError, KeyError, OSError):
            meta = DocMetadata()
    return DocContent(text=text, metadata=meta, format_note="docx")


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _document_text(xml_bytes: bytes) -> str:
    root = ET.fromstring(xml_bytes)
    paragraphs: list[str] = []
    for node in root.iter():
        if _local(node.tag) != "p":
            continue
        runs = [t.text for t in node.iter() if _local(t.tag) == "t" and t.text]
        paragraphs.append("".join(runs))
    return "\n".join(paragraphs)


def _core_properties(xml_bytes: bytes) -> DocMetadata:
    root = ET.fromstring(xml_bytes)
    values: dict[str, str] = {}
    for node in root.iter():
        name = _local(node.tag)
        if node.text and name in ("created", "modified", "lastModifiedBy",
                                  "creator", "title"):
            values.setdefault(name, node.text.strip())
    return DocMetadata(
        created=_parse_doc_time(values.get("created")),
        modified=_parse_doc_time(values.get("modified")),
        last_modified_by=values.get("lastModifiedBy"),
        author=values.get("creator"),
        title=values.get("title"),
    )


def _parse_doc_time(value: str | None) -> datetime | None:
    if not value:
        return None
    try:
        return parse_utc(value)
    except ValueError:
        return None  # never silently defaulted


def metadata_rule_flags(meta: DocMetadata, rules: RuleConfig | None = None,
                        analysis_time: datetime | None = None) -> list[RuleFlag]:
    """Apply the deterministic metadata rules; pure given its inputs.

    R3 (future timestamps) only fires when an explicit analysis time is
    supplied, keeping the rest independent of the wall clock.
    """
    rules = rules or RuleConfig()
    flags: list[RuleFlag] = []
    if ("R1" in rules.enabled and meta.created and meta.modified
            and meta.modified < meta.created):
        flags.append(RuleFlag(
            label="metadata-anomaly", severity="high", rule_id="R1",
            rationale=(
                f"modified timestamp {meta.modified.isoformat()} precedes "
                f"created timestamp {meta.created.isoformat()}"
            ),
        ))
    if ("R2" in rules.enabled and meta.last_modified_by
            and meta.last_modified_by in rules.suspicious_authors):
        flags.append(RuleFlag(
            label="suspicious-author", severity="medium", rule_id="R2",
            rationale=f"document last modified by {meta.last_modified_by!r}",
        ))
    if "R3" in rules.enabled and analysis_time is not None:
        for which, stamp in (("created", meta.created), ("modified", meta.modified)):
            if stamp and stamp > analysis_time:
                flags.append(RuleFlag(
                    label="future-timestamp", severity="medium", rule_id="R3",
                    rationale=(
                        f"{which} timestamp {stamp.isoformat()} is in the future "
                        f"relative to analysis time {analysis_time.isoformat()}"
                    ),
                ))
                break
    return flags


# --- html -------------------------------------------------------------------

_COMMENT_RE = re.compile(r"<!--.*?(-->|\Z)", re.DOTALL)
_SCRIPT_STYLE_RE = re.compile(
    r"<(script|style)\b[^>]*>.*?(</\1\s*>|\Z)", re.DOTALL | re.IGNORECASE)
_TAG_RE = re.compile(r"<[^>]*>")
_ENTITY_RE = re.compile(r"&(#x[0-9a-fA-F]+|#[0-9]+|amp|lt|gt|quot|apos);")
_NAMED_ENTITIES = {"amp": "&", "lt": "<", "gt": ">", "quot": '"', "apos": "'"}


def _decode_entity(match: re.Match) -> str:
    body = match.group(1)
    if body in _NAMED_ENTITIES:
        return _NAMED_ENTITIES[body]
    try:
        code = int(body[2:], 16) if body.startswith("#x") else int(body[1:])
        if 0 <= code <= 0x10FFFF and not 0xD800 <= code <= 0xDFFF:
            return chr(code)
    except ValueError:
        pass
    return match.group(0)


def strip_html(text: str) -> str:
    """Reduce markup to plain text: tags out, basic entities decoded,
    script/style dropped, whitespace runs collapsed."""
    text = _COMMENT_RE.sub(" ", text)
    text = _SCRIPT_STYLE_RE.sub(" ", text)
    text = _TAG_RE.sub(" ", text)
    text = _ENTITY_RE.sub(_decode_entity, text)
    return re.sub(r"\s+", " ", text).strip()
