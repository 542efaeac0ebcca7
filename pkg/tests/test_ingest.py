from __future__ import annotations

import builtins
import json
import subprocess
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scout.errors import LedgerCorrupt, RootNotFound
from scout.ingest import (
    GENESIS_HASH,
    UNHASHED_SHA,
    CustodyAction,
    CustodyLedger,
    EvidenceKind,
    detect_kind,
    ledger_verify,
    load_manifest,
    save_manifest,
    verify_untouched,
    walk_evidence,
)


def reference_sha256(path: Path) -> str:
    """Independent oracle: coreutils sha256sum, not hashlib."""
    out = subprocess.run(["sha256sum", str(path)], check=True,
                         capture_output=True, text=True)
    return out.stdout.split()[0]


# --- detect_kind -------------------------------------------------------------

@pytest.mark.parametrize("prefix,filename,expected", [
    (b"\xd4\xc3\xb2\xa1" + b"\x00" * 20, "x.bin", EvidenceKind.PCAP),
    (b"\xa1\xb2\xc3\xd4" + b"\x00" * 20, "cap", EvidenceKind.PCAP),
    (b"\xa1\xb2\x3c\x4d" + b"\x00" * 20, "cap", EvidenceKind.PCAP),
    (b"\x4d\x3c\xb2\xa1" + b"\x00" * 20, "cap", EvidenceKind.PCAP),
    (b"", "notes.txt", EvidenceKind.UNKNOWN),
    (b"From alice@example.com Mon Jan 1 10:00", "dump", EvidenceKind.MBOX),
    (b"PK\x03\x04rest", "report.docx", EvidenceKind.DOCX),
    (b"PK\x03\x04\x14\x00\x08\x08\xb7\xfe", "archive.zip", EvidenceKind.UNKNOWN),
    (b"RIFF\x24\x00\x00\x00WAVE", "sound", EvidenceKind.AUDIO),
    (b"ID3\x04\x00", "track", EvidenceKind.AUDIO),
    (b"fLaC\x00", "track", EvidenceKind.AUDIO),
    (b"OggS\x00", "track", EvidenceKind.AUDIO),
    (b"\xff\xd8\xff\xe0", "photo", EvidenceKind.IMAGE),
    (b"\x89PNG\r\n\x1a\n", "img", EvidenceKind.IMAGE),
    (b"GIF89a", "anim", EvidenceKind.IMAGE),
    (b"\x00\x00\x00\x20ftypisom", "clip", EvidenceKind.VIDEO),
    (b"  \n\t<!DOCTYPE HTML><html>", "page", EvidenceKind.HTML),
    (b"<HTML><body>", "page", EvidenceKind.HTML),
    (b"plain words here", "anything", EvidenceKind.PLAIN_TEXT),
    (b"Received: from relay\r\n\r\nbody", "msg.eml", EvidenceKind.EML),
    (b"some markup-free text", "saved.htm", EvidenceKind.HTML),
    (b"text with \x00 nul", "data", EvidenceKind.UNKNOWN),
    (b"\xff\xfe\x00\x01binary", "blob", EvidenceKind.UNKNOWN),
    # pcapng stays out of scope for the classic parser
    (b"\x0a\x0d\x0d\x0a\xc0\x00\x00\x00\x4d\x3c\x2b\x1a", "cap.pcapng",
     EvidenceKind.UNKNOWN),
])
def test_detect_kind_table(prefix, filename, expected):
    assert detect_kind(prefix, filename) is expected


@given(st.binary(max_size=600), st.text(max_size=30))
@settings(max_examples=300, deadline=None)
def test_detect_kind_total_and_deterministic(prefix, filename):
    first = detect_kind(prefix, filename)
    assert first is detect_kind(prefix, filename)
    assert isinstance(first, EvidenceKind)


def test_detect_kind_truncated_utf8_at_prefix_boundary():
    # 512-byte read cutting a multibyte char in half must still classify text
    prefix = (b"a" * 510 + "é".encode("utf-8"))[:512]
    assert detect_kind(prefix, "notes") is EvidenceKind.PLAIN_TEXT


# --- ledger -------------------------------------------------------------------

def make_ledger(tmp_path: Path, n: int = 0) -> CustodyLedger:
    ledger = CustodyLedger(tmp_path / "ledger.jsonl")
    for i in range(n):
        ledger.append(CustodyAction.REGISTERED, f"{i:016x}", "a" * 64)
    return ledger


def test_ledger_genesis_record(tmp_path):
    ledger = make_ledger(tmp_path)
    record = ledger.append(CustodyAction.REGISTERED, "abc123abc123abc1", "b" * 64)
    assert record.seq == 0
    assert record.prev_record_hash == GENESIS_HASH
    assert ledger.verify().ok


def test_ledger_chains_prev_hash(tmp_path):
    ledger = make_ledger(tmp_path, 2)
    third = ledger.append(CustodyAction.ANALYZED, "x" * 16, "c" * 64)
    assert third.seq == 2
    assert third.prev_record_hash == ledger.records[1].record_hash


def test_ledger_100_appends_verify_and_any_flip_breaks(tmp_path):
    ledger = make_ledger(tmp_path, 100)
    assert ledger.verify().ok
    path = ledger.path
    original = path.read_bytes()
    # oracle: recompute the chain independently of the package
    prev = GENESIS_HASH
    import hashlib
    for lineno, raw in enumerate(original.decode().splitlines()):
        obj = json.loads(raw)
        assert obj["prev_record_hash"] == prev
        stripped = dict(obj, record_hash="")
        line = json.dumps(stripped, separators=(",", ":"), ensure_ascii=False)
        assert hashlib.sha256(line.encode()).hexdigest() == obj["record_hash"], lineno
        prev = obj["record_hash"]
    # flip one byte somewhere in the middle record
    mutated = bytearray(original)
    pos = len(mutated) // 2
    mutated[pos] ^= 0x01
    path.write_bytes(bytes(mutated))
    outcome = ledger_verify(path)
    assert not outcome.ok


def test_ledger_verify_ok_on_every_prefix(tmp_path):
    ledger = make_ledger(tmp_path, 30)
    lines = ledger.path.read_bytes().splitlines(keepends=True)
    for upto in range(len(lines) + 1):
        prefix_path = tmp_path / "prefix.jsonl"
        prefix_path.write_bytes(b"".join(lines[:upto]))
        assert ledger_verify(prefix_path).ok


def test_ledger_mutated_timestamp_breaks_at_record(tmp_path):
    ledger = make_ledger(tmp_path, 3)
    lines = ledger.path.read_text().splitlines()
    obj = json.loads(lines[1])
    obj["timestamp"] = "1999-01-01T00:00:00+00:00"
    lines[1] = json.dumps(obj, separators=(",", ":"), ensure_ascii=False)
    ledger.path.write_text("\n".join(lines) + "\n")
    outcome = ledger_verify(ledger.path)
    assert not outcome.ok
    assert outcome.broken_seq == 1
    assert outcome.reason == "hash-mismatch"


def test_ledger_partial_trailing_line_is_corrupt(tmp_path):
    ledger = make_ledger(tmp_path, 2)
    data = ledger.path.read_bytes()
    ledger.path.write_bytes(data + b'{"seq":2,"timestamp"')
    assert not ledger_verify(ledger.path).ok
    with pytest.raises(LedgerCorrupt):
        CustodyLedger(ledger.path)


def test_ledger_empty_file_and_missing_file_verify_ok(tmp_path):
    assert ledger_verify(tmp_path / "absent.jsonl").ok
    (tmp_path / "empty.jsonl").write_bytes(b"")
    assert ledger_verify(tmp_path / "empty.jsonl").ok


# --- walk_evidence ---------------------------------------------------------------

def test_walk_empty_directory(tmp_path):
    root = tmp_path / "evidence"
    root.mkdir()
    ledger = make_ledger(tmp_path)
    manifest = walk_evidence(root, ledger)
    assert manifest.items == ()
    assert ledger.records == []


def test_walk_two_files_sorted_and_registered(tmp_path):
    root = tmp_path / "evidence"
    root.mkdir()
    (root / "b.mbox").write_bytes(b"From x@y Mon Jan 1\n\nhi\n")
    (root / "a.pcap").write_bytes(b"\xd4\xc3\xb2\xa1" + b"\x00" * 20)
    ledger = make_ledger(tmp_path)
    manifest = walk_evidence(root, ledger)
    assert [i.path for i in manifest.items] == ["a.pcap", "b.mbox"]
    assert [i.kind for i in manifest.items] == [EvidenceKind.PCAP, EvidenceKind.MBOX]
    actions = [(r.seq, r.action) for r in ledger.records]
    assert actions == [(0, CustodyAction.REGISTERED), (1, CustodyAction.REGISTERED)]
    assert ledger.records[0].evidence_id == manifest.items[0].id


def test_walk_hashes_match_reference_tool(tmp_path):
    import random
    rng = random.Random(20250601)
    root = tmp_path / "evidence"
    root.mkdir()
    (root / "sub").mkdir()
    for i in range(50):
        rel = Path("sub") / f"f{i:02d}.bin" if i % 2 else Path(f"f{i:02d}.bin")
        (root / rel).write_bytes(rng.randbytes(rng.randint(0, 4096)))
    ledger = make_ledger(tmp_path)
    manifest = walk_evidence(root, ledger)
    assert len(manifest.items) == 50
    for item in manifest.items:
        assert item.sha256 == reference_sha256(root / item.path)
        assert item.id == item.sha256[:16]


def test_walk_missing_root_raises(tmp_path):
    with pytest.raises(RootNotFound):
        walk_evidence(tmp_path / "nope", make_ledger(tmp_path))


def test_walk_symlink_recorded_unknown_never_followed(tmp_path):
    secret = tmp_path / "outside-secret.txt"
    secret.write_text("must never be read")
    root = tmp_path / "evidence"
    root.mkdir()
    (root / "normal.txt").write_text("fine")
    (root / "link").symlink_to(secret)
    manifest = walk_evidence(root, make_ledger(tmp_path))
    by_path = {i.path: i for i in manifest.items}
    assert by_path["link"].kind is EvidenceKind.UNKNOWN
    assert by_path["link"].sha256 == UNHASHED_SHA
    assert by_path["link"].note == "symlink-not-followed"


def test_walk_unreadable_file_degrades_not_aborts(tmp_path, monkeypatch):
    root = tmp_path / "evidence"
    root.mkdir()
    (root / "good.txt").write_text("ok")
    (root / "locked.txt").write_text("secret")
    real_open = builtins.open

    def guarded_open(file, *args, **kwargs):
        if str(file).endswith("locked.txt"):
            raise PermissionError(13, "Permission denied")
        return real_open(file, *args, **kwargs)

    monkeypatch.setattr(builtins, "open", guarded_open)
    manifest = walk_evidence(root, make_ledger(tmp_path), workers=1)
    by_path = {i.path: i for i in manifest.items}
    assert by_path["good.txt"].kind is EvidenceKind.PLAIN_TEXT
    assert by_path["locked.txt"].kind is EvidenceKind.UNKNOWN
    assert "unreadable" in (by_path["locked.txt"].note or "")


# --- verify_untouched ----------------------------------------------------------

def test_verify_untouched_clean(tmp_path):
    root = tmp_path / "evidence"
    root.mkdir()
    (root / "a.txt").write_text("alpha")
    ledger = make_ledger(tmp_path)
    manifest = walk_evidence(root, ledger)
    assert verify_untouched(manifest, ledger) == []
    assert ledger.records[-1].action is CustodyAction.VERIFIED
    assert ledger.records[-1].evidence_id == "*"


def test_verify_untouched_detects_deletion_and_flip(tmp_path):
    root = tmp_path / "evidence"
    root.mkdir()
    (root / "a.txt").write_text("alpha")
    (root / "b.txt").write_text("beta")
    ledger = make_ledger(tmp_path)
    manifest = walk_evidence(root, ledger)

    (root / "a.txt").unlink()
    data = bytearray((root / "b.txt").read_bytes())
    data[0] ^= 0xFF
    (root / "b.txt").write_bytes(bytes(data))

    mismatches = {m.path: m for m in verify_untouched(manifest, ledger)}
    assert mismatches["a.txt"].missing
    assert mismatches["b.txt"].actual_sha256 == reference_sha256(root / "b.txt")
    assert mismatches["b.txt"].actual_sha256 != mismatches["b.txt"].expected_sha256


def test_walk_then_verify_roundtrip_readonly_contract(tmp_path):
    root = tmp_path / "evidence"
    root.mkdir()
    for i in range(10):
        (root / f"f{i}.txt").write_text(f"content {i}")
    before = {p.name: (p.stat().st_mtime_ns, reference_sha256(p))
              for p in root.iterdir()}
    ledger = make_ledger(tmp_path)
    manifest = walk_evidence(root, ledger)
    assert verify_untouched(manifest, ledger) == []
    after = {p.name: (p.stat().st_mtime_ns, reference_sha256(p))
             for p in root.iterdir()}
    assert before == after


# --- manifest persistence ---------------------------------------------------------

def test_manifest_roundtrip_bit_exact(tmp_path):
    root = tmp_path / "evidence"
    root.mkdir()
    (root / "x.txt").write_text("hello")
    (root / "y.html").write_text("<html><p>hi</p></html>")
    manifest = walk_evidence(root, make_ledger(tmp_path), case_ref="CASE-1")
    path = tmp_path / "manifest.json"
    save_manifest(manifest, path)
    loaded = load_manifest(path)
    assert loaded == manifest
    save_manifest(loaded, tmp_path / "manifest2.json")
    assert (tmp_path / "manifest2.json").read_bytes() == path.read_bytes()


def test_manifest_rejects_escaping_paths(tmp_path):
    payload = {
        "evidence_root": "/tmp/e",
        "created_at": "2025-01-01T00:00:00+00:00",
        "case_ref": "",
        "items": [{
            "id": "0" * 16, "path": "../escape", "kind": "Unknown",
            "size_bytes": 0, "sha256": "0" * 64,
            "detected_at": "2025-01-01T00:00:00+00:00", "note": None,
        }],
    }
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(payload))
    with pytest.raises(ValueError):
        load_manifest(path)
