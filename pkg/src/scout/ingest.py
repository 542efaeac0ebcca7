"""Evidence intake: read-only tree walk, kind detection, hashing, custody ledger.

Every interaction with the evidence tree goes through this module and is
recorded in a hash-chained, append-only ledger so tampering (by this tool or
anything else) is detectable afterwards.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path

from . import TOOL_ACTOR
from .errors import LedgerCorrupt, RootNotFound
from .timeutils import Clock, parse_utc, utc_now

log = logging.getLogger(__name__)

GENESIS_HASH = "0" * 64
# Sentinel for items that could not be hashed (unreadable file, symlink).
UNHASHED_SHA = "0" * 64
SHA256_RE = re.compile(r"^[0-9a-f]{64}$")

_HASH_CHUNK = 1 << 20
_PREFIX_LEN = 512

_PCAP_MAGICS = (
    b"\xa1\xb2\xc3\xd4",  # big-endian, microseconds
    b"\xd4\xc3\xb2\xa1",  # little-endian, microseconds
    b"\xa1\xb2\x3c\x4d",  # big-endian, nanoseconds
    b"\x4d\x3c\xb2\xa1",  # little-endian, nanoseconds
)


class EvidenceKind(str, Enum):
    PCAP = "Pcap"
    MBOX = "Mbox"
    EML = "Eml"
    DOCX = "Docx"
    HTML = "Html"
    PLAIN_TEXT = "PlainText"
    AUDIO = "Audio"
    IMAGE = "Image"
    VIDEO = "Video"
    UNKNOWN = "Unknown"


class CustodyAction(str, Enum):
    REGISTERED = "Registered"
    EXTRACTED = "Extracted"
    ANALYZED = "Analyzed"
    REPORTED = "Reported"
    VERIFIED = "Verified"


@dataclass(frozen=True)
class EvidenceItem:
    """One seized file as registered during the walk."""

    id: str          # first 16 hex chars of sha256
    path: str        # posix path relative to the evidence root
    kind: EvidenceKind
    size_bytes: int
    sha256: str
    detected_at: datetime
    note: str | None = None

    def __post_init__(self):
        if not SHA256_RE.match(self.sha256):
            raise ValueError(f"invalid sha256 for {self.path}")
        if self.id != self.sha256[:16]:
            raise ValueError(f"id must be the first 16 hex chars of sha256 ({self.path})")


@dataclass(frozen=True)
class Manifest:
    evidence_root: str
    created_at: datetime
    case_ref: str
    items: tuple[EvidenceItem, ...]

    def __post_init__(self):
        paths = [i.path for i in self.items]
        if paths != sorted(paths):
            raise ValueError("manifest items must be sorted by path")
        if len(set(paths)) != len(paths):
            raise ValueError("manifest contains duplicate paths")

    def item_by_id(self, evidence_id: str) -> EvidenceItem | None:
        for item in self.items:
            if item.id == evidence_id:
                return item
        return None


@dataclass(frozen=True)
class CustodyRecord:
    seq: int
    timestamp: str       # UTC ISO-8601
    actor: str
    action: CustodyAction
    evidence_id: str     # item id or "*" for whole-corpus actions
    evidence_sha256: str  # hex or "-"
    prev_record_hash: str
    record_hash: str


@dataclass(frozen=True)
class VerifyOutcome:
    ok: bool
    broken_seq: int | None = None
    reason: str | None = None

    @classmethod
    def passed(cls) -> "VerifyOutcome":
        return cls(ok=True)

    @classmethod
    def broken_at(cls, seq: int, reason: str) -> "VerifyOutcome":
        return cls(ok=False, broken_seq=seq, reason=reason)


@dataclass(frozen=True)
class Mismatch:
    path: str
    expected_sha256: str
    actual_sha256: str | None  # None when the file is missing/unreadable

    @property
    def missing(self) -> bool:
        return self.actual_sha256 is None


# --- custody ledger -----------------------------------------------------

_LEDGER_FIELDS = ("seq", "timestamp", "actor", "action", "evidence_id",
                  "evidence_sha256", "prev_record_hash", "record_hash")


def _canonical_line(seq: int, timestamp: str, actor: str, action: str,
                    evidence_id: str, evidence_sha256: str,
                    prev_record_hash: str, record_hash: str = "") -> str:
    # Field order is fixed by the ledger file contract; the record hash is
    # computed over this serialization with record_hash emptied.
    return json.dumps(
        {
            "seq": seq,
            "timestamp": timestamp,
            "actor": actor,
            "action": action,
            "evidence_id": evidence_id,
            "evidence_sha256": evidence_sha256,
            "prev_record_hash": prev_record_hash,
            "record_hash": record_hash,
        },
        separators=(",", ":"),
        ensure_ascii=False,
    )


def _record_line(record: CustodyRecord) -> str:
    return _canonical_line(
        record.seq, record.timestamp, record.actor, record.action.value,
        record.evidence_id, record.evidence_sha256, record.prev_record_hash,
        record.record_hash,
    )


def compute_record_hash(seq: int, timestamp: str, actor: str, action: str,
                        evidence_id: str, evidence_sha256: str,
                        prev_record_hash: str) -> str:
    line = _canonical_line(seq, timestamp, actor, action, evidence_id,
                           evidence_sha256, prev_record_hash)
    return hashlib.sha256(line.encode("utf-8")).hexdigest()


def ledger_verify(path: Path | str) -> VerifyOutcome:
    """Recompute every record hash and chain link in a ledger file.

    ok iff seq values are contiguous from 0, every line matches its canonical
    serialization, every record_hash recomputes and every prev link holds.
    Errors are the return value; a missing file is an empty, valid ledger.
    """
    path = Path(path)
    if not path.exists():
        return VerifyOutcome.passed()
    data = path.read_bytes()
    prev_hash = GENESIS_HASH
    seq = 0
    for raw in data.split(b"\n"):
        if not raw:
            continue
        outcome = _verify_line(raw, seq, prev_hash)
        if not outcome.ok:
            return outcome
        record = _parse_line(raw)
        prev_hash = record.record_hash
        seq += 1
    return VerifyOutcome.passed()


def _verify_line(raw: bytes, expected_seq: int, expected_prev: str) -> VerifyOutcome:
    try:
        text = raw.decode("utf-8")
        obj = json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError):
        return VerifyOutcome.broken_at(expected_seq, "malformed-line")
    if not isinstance(obj, dict) or tuple(obj.keys()) != _LEDGER_FIELDS:
        return VerifyOutcome.broken_at(expected_seq, "malformed-line")
    if obj["seq"] != expected_seq:
        return VerifyOutcome.broken_at(expected_seq, "seq-discontinuity")
    # Any cosmetic rewrite of the line (whitespace, numeric form) is tampering.
    expected_line = _canonical_line(*(obj[f] for f in _LEDGER_FIELDS))
    if expected_line != text:
        return VerifyOutcome.broken_at(expected_seq, "non-canonical-line")
    if obj["prev_record_hash"] != expected_prev:
        return VerifyOutcome.broken_at(expected_seq, "chain-link-mismatch")
    recomputed = compute_record_hash(
        obj["seq"], obj["timestamp"], obj["actor"], obj["action"],
        obj["evidence_id"], obj["evidence_sha256"], obj["prev_record_hash"],
    )
    if recomputed != obj["record_hash"]:
        return VerifyOutcome.broken_at(expected_seq, "hash-mismatch")
    return VerifyOutcome.passed()


def _parse_line(raw: bytes) -> CustodyRecord:
    obj = json.loads(raw.decode("utf-8"))
    return CustodyRecord(
        seq=obj["seq"],
        timestamp=obj["timestamp"],
        actor=obj["actor"],
        action=CustodyAction(obj["action"]),
        evidence_id=obj["evidence_id"],
        evidence_sha256=obj["evidence_sha256"],
        prev_record_hash=obj["prev_record_hash"],
        record_hash=obj["record_hash"],
    )


class CustodyLedger:
    """Append-only hash-chained ledger backed by a newline-delimited JSON file.

    Single-writer contract: all appends are serialized through one lock.
    Each append is one buffered write of a complete line, so a crash leaves
    either no record or a complete record.
    """

    def __init__(self, path: Path | str, actor: str = TOOL_ACTOR,
                 clock: Clock = utc_now):
        self.path = Path(path)
        self.actor = actor
        self.clock = clock
        self._lock = threading.Lock()
        self._records: list[CustodyRecord] = []
        if self.path.exists():
            outcome = ledger_verify(self.path)
            if not outcome.ok:
                raise LedgerCorrupt(outcome.broken_seq or 0, outcome.reason or "unknown")
            for raw in self.path.read_bytes().split(b"\n"):
                if raw:
                    self._records.append(_parse_line(raw))

    @property
    def records(self) -> list[CustodyRecord]:
        return list(self._records)

    @property
    def head_hash(self) -> str:
        return self._records[-1].record_hash if self._records else GENESIS_HASH

    def append(self, action: CustodyAction, evidence_id: str,
               evidence_sha256: str) -> CustodyRecord:
        with self._lock:
            seq = len(self._records)
            prev = self.head_hash
            timestamp = self.clock().isoformat()
            record_hash = compute_record_hash(
                seq, timestamp, self.actor, action.value, evidence_id,
                evidence_sha256, prev,
            )
            record = CustodyRecord(
                seq=seq, timestamp=timestamp, actor=self.actor, action=action,
                evidence_id=evidence_id, evidence_sha256=evidence_sha256,
                prev_record_hash=prev, record_hash=record_hash,
            )
            line = (_record_line(record) + "\n").encode("utf-8")
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("ab") as fh:
                fh.write(line)
                fh.flush()
            self._records.append(record)
            return record

    def verify(self) -> VerifyOutcome:
        return ledger_verify(self.path)


# --- kind detection -----------------------------------------------------

def detect_kind(prefix: bytes, filename: str) -> EvidenceKind:
    """Classify a file from its first bytes, falling back to the extension.

    Magic bytes take priority; the extension only disambiguates within a
    content family (zip -> docx, utf-8 text -> eml/html/plain). Total: the
    worst case is Unknown.
    """
    if not prefix:
        return EvidenceKind.UNKNOWN
    head4 = prefix[:4]
    if head4 in _PCAP_MAGICS:
        return EvidenceKind.PCAP
    ext = Path(filename).suffix.lower()
    if head4 == b"PK\x03\x04" and ext == ".docx":
        return EvidenceKind.DOCX
    if prefix.startswith(b"From "):
        return EvidenceKind.MBOX
    if head4 in (b"RIFF", b"fLaC", b"OggS") or prefix[:3] == b"ID3":
        return EvidenceKind.AUDIO
    if (prefix[:3] == b"\xff\xd8\xff" or prefix[:8] == b"\x89PNG\r\n\x1a\n"
            or prefix[:6] in (b"GIF87a", b"GIF89a")):
        return EvidenceKind.IMAGE
    if len(prefix) >= 8 and prefix[4:8] == b"ftyp":
        return EvidenceKind.VIDEO
    lead = prefix.lstrip()[:14].lower()
    if lead.startswith(b"<!doctype html") or lead.startswith(b"<html"):
        return EvidenceKind.HTML
    if b"\x00" not in prefix and _decodes_utf8(prefix):
        if ext == ".eml":
            return EvidenceKind.EML
        if ext in (".html", ".htm"):
            return EvidenceKind.HTML
        return EvidenceKind.PLAIN_TEXT
    return EvidenceKind.UNKNOWN


def _decodes_utf8(prefix: bytes) -> bool:
    # A full 512-byte prefix may cut a multibyte sequence at the boundary.
    for trim in range(4):
        if trim and len(prefix) < _PREFIX_LEN:
            break
        try:
            prefix[: len(prefix) - trim].decode("utf-8")
            return True
        except UnicodeDecodeError:
            continue
    return False


# --- walking and hashing ------------------------------------------------

def sha256_file(path: Path | str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(_HASH_CHUNK)
            if not block:
                break
            digest.update(block)
    return digest.hexdigest()


def _inspect_file(abs_path: Path) -> tuple[str, EvidenceKind, int, str | None]:
    """Hash + classify one file, opened strictly read-only."""
    try:
        size = abs_path.stat().st_size
    except OSError:
        size = 0
    try:
        digest = hashlib.sha256()
        prefix = b""
        with open(abs_path, "rb") as fh:
            prefix = fh.read(_PREFIX_LEN)
            digest.update(prefix)
            while True:
                block = fh.read(_HASH_CHUNK)
                if not block:
                    break
                digest.update(block)
        return digest.hexdigest(), detect_kind(prefix, abs_path.name), size, None
    except OSError as exc:
        return UNHASHED_SHA, EvidenceKind.UNKNOWN, size, f"unreadable: {exc.strerror or exc}"


def _iter_entries(root: Path):
    """Yield (absolute path, note) pairs depth-first; symlinks never followed."""
    stack = [root]
    while stack:
        directory = stack.pop()
        try:
            entries = sorted(os.scandir(directory), key=lambda e: e.name)
        except OSError as exc:
            if directory != root:
                yield directory, f"unreadable-directory: {exc.strerror or exc}"
            continue
        for entry in entries:
            p = Path(entry.path)
            if entry.is_symlink():
                yield p, "symlink-not-followed"
            elif entry.is_dir(follow_symlinks=False):
                stack.append(p)
            elif entry.is_file(follow_symlinks=False):
                yield p, None


def walk_evidence(root: Path | str, ledger: CustodyLedger, case_ref: str = "",
                  clock: Clock | None = None, workers: int = 4) -> Manifest:
    """Register every regular file under root, read-only.

    Hashing runs on a bounded worker pool; ledger appends are serialized
    afterwards in path order. Per-file read failures degrade to annotated
    Unknown items instead of aborting the walk.
    """
    root = Path(root)
    if not root.is_dir():
        raise RootNotFound(str(root))
    clock = clock or ledger.clock

    plain_files: list[Path] = []
    degraded: list[tuple[Path, str]] = []
    for abs_path, note in _iter_entries(root):
        if note is None:
            plain_files.append(abs_path)
        else:
            degraded.append((abs_path, note))

    items: list[EvidenceItem] = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for abs_path, (sha, kind, size, note) in zip(
                plain_files, pool.map(_inspect_file, plain_files)):
            items.append(EvidenceItem(
                id=sha[:16],
                path=abs_path.relative_to(root).as_posix(),
                kind=kind,
                size_bytes=size,
                sha256=sha,
                detected_at=clock(),
                note=note,
            ))
    for abs_path, note in degraded:
        size = 0
        try:
            size = abs_path.lstat().st_size
        except OSError:
            pass
        items.append(EvidenceItem(
            id=UNHASHED_SHA[:16],
            path=abs_path.relative_to(root).as_posix(),
            kind=EvidenceKind.UNKNOWN,
            size_bytes=size,
            sha256=UNHASHED_SHA,
            detected_at=clock(),
            note=note,
        ))

    items.sort(key=lambda i: i.path)
    for item in items:
        ledger.append(CustodyAction.REGISTERED, item.id, item.sha256)
    return Manifest(
        evidence_root=str(root),
        created_at=clock(),
        case_ref=case_ref,
        items=tuple(items),
    )


def verify_untouched(manifest: Manifest, ledger: CustodyLedger,
                     root: Path | str | None = None) -> list[Mismatch]:
    """Re-hash every manifest item; empty result means the corpus is intact.

    Items that were never hashable (unreadable, symlink) are skipped: there is
    no baseline to compare against. Appends one corpus-level Verified record.
    """
    root = Path(root) if root is not None else Path(manifest.evidence_root)
    mismatches: list[Mismatch] = []
    for item in manifest.items:
        if item.sha256 == UNHASHED_SHA:
            continue
        target = root / item.path
        try:
            actual = sha256_file(target)
        except OSError:
            mismatches.append(Mismatch(item.path, item.sha256, None))
            continue
        if actual != item.sha256:
            mismatches.append(Mismatch(item.path, item.sha256, actual))
    ledger.append(CustodyAction.VERIFIED, "*", "-")
    return mismatches


# --- manifest persistence -----------------------------------------------

def manifest_to_dict(manifest: Manifest) -> dict:
    return {
        "evidence_root": manifest.evidence_root,
        "created_at": manifest.created_at.isoformat(),
        "case_ref": manifest.case_ref,
        "items": [
            {
                "id": i.id,
                "path": i.path,
                "kind": i.kind.value,
                "size_bytes": i.size_bytes,
                "sha256": i.sha256,
                "detected_at": i.detected_at.isoformat(),
                "note": i.note,
            }
            for i in manifest.items
        ],
    }


def manifest_from_dict(data: dict) -> Manifest:
    items = []
    for entry in data["items"]:
        path = entry["path"]
        if path.startswith("/") or ".." in path.split("/"):
            raise ValueError(f"manifest path escapes evidence root: {path}")
        items.append(EvidenceItem(
            id=entry["id"],
            path=path,
            kind=EvidenceKind(entry["kind"]),
            size_bytes=entry["size_bytes"],
            sha256=entry["sha256"],
            detected_at=parse_utc(entry["detected_at"]),
            note=entry.get("note"),
        ))
    return Manifest(
        evidence_root=data["evidence_root"],
        created_at=parse_utc(data["created_at"]),
        case_ref=data["case_ref"],
        items=tuple(items),
    )


def save_manifest(manifest: Manifest, path: Path | str) -> None:
    Path(path).write_text(
        json.dumps(manifest_to_dict(manifest), indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def load_manifest(path: Path | str) -> Manifest:
    return manifest_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
