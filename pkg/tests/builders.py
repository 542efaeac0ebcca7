"""Reference encoders and file builders used as test oracles.

Everything here is written independently of the package's parsers: packets
and DNS messages are packed by hand, docx archives are assembled from raw
XML, media files from PIL/wave/struct. Tests compare the package's decoders
against what these builders wrote.
"""

from __future__ import annotations

import io
import struct
import wave
import zipfile
from email.message import EmailMessage

from PIL import Image

# --- DNS (reference encoder) -------------------------------------------------

def encode_dns_name(name: str) -> bytes:
    out = b""
    if name:
        for label in name.split("."):
            raw = label.encode("ascii")
            out += bytes([len(raw)]) + raw
    return out + b"\x00"


def dns_query(txid: int, name: str, qtype: int = 1) -> bytes:
    header = struct.pack(">HHHHHH", txid, 0x0100, 1, 0, 0, 0)
    return header + encode_dns_name(name) + struct.pack(">HH", qtype, 1)


def dns_response(txid: int, name: str, answers: list[tuple[int, bytes]],
                 qtype: int = 1) -> bytes:
    """Answers are (rtype, rdata) pairs; answer names point back at the
    question via a compression pointer (0xC00C)."""
    header = struct.pack(">HHHHHH", txid, 0x8180, 1, len(answers), 0, 0)
    body = encode_dns_name(name) + struct.pack(">HH", qtype, 1)
    for rtype, rdata in answers:
        body += struct.pack(">HHHIH", 0xC00C, rtype, 1, 300, len(rdata)) + rdata
    return header + body


def a_rdata(ip: str) -> bytes:
    return bytes(int(part) for part in ip.split("."))


# --- frames -------------------------------------------------------------------

def _ip_checksum(header: bytes) -> int:
    total = 0
    for i in range(0, len(header), 2):
        total += struct.unpack(">H", header[i:i + 2])[0]
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def ipv4(src: str, dst: str, proto: int, payload: bytes) -> bytes:
    total_len = 20 + len(payload)
    header = struct.pack(
        ">BBHHHBBH4s4s", 0x45, 0, total_len, 0, 0, 64, proto, 0,
        a_rdata(src), a_rdata(dst))
    checksum = _ip_checksum(header)
    header = header[:10] + struct.pack(">H", checksum) + header[12:]
    return header + payload


def udp(sport: int, dport: int, payload: bytes) -> bytes:
    return struct.pack(">HHHH", sport, dport, 8 + len(payload), 0) + payload


def icmp(icmp_type: int, code: int, rest: bytes = b"\x00" * 4) -> bytes:
    return struct.pack(">BBH", icmp_type, code, 0) + rest


def ether(payload: bytes, ethertype: int = 0x0800,
          src: bytes = b"\x02\x00\x00\x00\x00\x01",
          dst: bytes = b"\x02\x00\x00\x00\x00\x02") -> bytes:
    return dst + src + struct.pack(">H", ethertype) + payload


def udp_frame(src_ip: str, dst_ip: str, sport: int, dport: int, payload: bytes) -> bytes:
    return ether(ipv4(src_ip, dst_ip, 17, udp(sport, dport, payload)))


def icmp_frame(src_ip: str, dst_ip: str, icmp_type: int, code: int) -> bytes:
    return ether(ipv4(src_ip, dst_ip, 1, icmp(icmp_type, code)))


# --- pcap (reference writer) -----------------------------------------------------

_PCAP_MAGIC = {
    ("BE", "micro"): b"\xa1\xb2\xc3\xd4",
    ("LE", "micro"): b"\xd4\xc3\xb2\xa1",
    ("BE", "nano"): b"\xa1\xb2\x3c\x4d",
    ("LE", "nano"): b"\x4d\x3c\xb2\xa1",
}


def pcap_bytes(records: list[tuple[int, int, bytes]], byte_order: str = "LE",
               resolution: str = "micro", link_type: int = 1,
               snaplen: int = 65535) -> bytes:
    """records: (ts_sec, ts_frac, payload) triples in capture order."""
    endian = ">" if byte_order == "BE" else "<"
    out = _PCAP_MAGIC[(byte_order, resolution)]
    out += struct.pack(endian + "HHiIII", 2, 4, 0, 0, snaplen, link_type)
    for ts_sec, ts_frac, payload in records:
        out += struct.pack(endian + "IIII", ts_sec, ts_frac, len(payload), len(payload))
        out += payload
    return out


def slashdot_capture() -> bytes:
    """Analog of the repeated-DNS-plus-ICMP-errors capture: repeated queries
    for land.vendors.slashdot.org answered 216.34.181.47, one apache query
    answered 216.34.181.48, and dest-unreachable ICMP errors."""
    client, resolver = "192.168.1.10", "192.168.1.1"
    records = []
    ts = 1_700_000_000
    for i in range(3):
        q = dns_query(0x1000 + i, "land.vendors.slashdot.org")
        r = dns_response(0x1000 + i, "land.vendors.slashdot.org",
                         [(1, a_rdata("216.34.181.47"))])
        records.append((ts, 0, udp_frame(client, resolver, 34000 + i, 53, q)))
        records.append((ts, 500, udp_frame(resolver, client, 53, 34000 + i, r)))
        ts += 1
    q = dns_query(0x2000, "apache.slashdot.org")
    r = dns_response(0x2000, "apache.slashdot.org", [(1, a_rdata("216.34.181.48"))])
    records.append((ts, 0, udp_frame(client, resolver, 35000, 53, q)))
    records.append((ts, 800, udp_frame(resolver, client, 53, 35000, r)))
    for i in range(2):
        records.append((ts + 1 + i, 0, icmp_frame(resolver, client, 3, 3)))
    return pcap_bytes(records)


# --- docx (reference writer) -------------------------------------------------------

_CONTENT_TYPES = """<?xml version="1.0" encoding="UTF-8" standalone="yes"?>
<Types xmlns="http://schemas.openxmlformats.org/package/2006/content-types">
  <Default Extension="xml" ContentType="application/xml"/>
  <Override PartName="/word/document.xml"
    ContentType="application/vnd.openxmlformats-officedocument.wordprocessingml.document.main+xml"/>
  <Override PartName="/docProps/core.xml"
    ContentType="application/vnd.openxmlformats-package.core-properties+xml"/>
</Types>
"""

_DOC_TEMPLATE = """<?xml version="1.0" encoding="UTF-8" standalone="yes"?>
<w:document xmlns:w="http://schemas.openxmlformats.org/wordprocessingml/2006/main">
  <w:body>{body}</w:body>
</w:document>
"""

_CORE_TEMPLATE = """<?xml version="1.0" encoding="UTF-8" standalone="yes"?>
<cp:coreProperties
    xmlns:cp="http://schemas.openxmlformats.org/package/2006/metadata/core-properties"
    xmlns:dc="http://purl.org/dc/elements/1.1/"
    xmlns:dcterms="http://purl.org/dc/terms/"
    xmlns:xsi="http://www.w3.org/2001/XMLSchema-instance">{fields}</cp:coreProperties>
"""


def _xml_escape(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;"))


def build_docx(paragraphs: list[str], created: str | None = None,
               modified: str | None = None, last_modified_by: str | None = None,
               creator: str | None = None, title: str | None = None,
               include_core: bool = True, include_document: bool = True) -> bytes:
    body = "".join(
        f"<w:p><w:r><w:t>{_xml_escape(p)}</w:t></w:r></w:p>" for p in paragraphs
    )
    fields = ""
    if created:
        fields += f'<dcterms:created xsi:type="dcterms:W3CDTF">{created}</dcterms:created>'
    if modified:
        fields += f'<dcterms:modified xsi:type="dcterms:W3CDTF">{modified}</dcterms:modified>'
    if last_modified_by:
        fields += f"<cp:lastModifiedBy>{_xml_escape(last_modified_by)}</cp:lastModifiedBy>"
    if creator:
        fields += f"<dc:creator>{_xml_escape(creator)}</dc:creator>"
    if title:
        fields += f"<dc:title>{_xml_escape(title)}</dc:title>"

    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("[Content_Types].xml", _CONTENT_TYPES)
        if include_document:
            zf.writestr("word/document.xml", _DOC_TEMPLATE.format(body=body))
        if include_core:
            zf.writestr("docProps/core.xml", _CORE_TEMPLATE.format(fields=fields))
    return buf.getvalue()


# --- email ------------------------------------------------------------------------

def build_email(subject: str, body: str, sender: str = "alice@example.com",
                recipient: str = "bob@example.com", message_id: str | None = None,
                date: str = "Mon, 01 Jan 2024 10:00:00 +0000") -> EmailMessage:
    msg = EmailMessage()
    msg["From"] = sender
    msg["To"] = recipient
    msg["Subject"] = subject
    msg["Date"] = date
    if message_id:
        msg["Message-ID"] = message_id
    msg.set_content(body)
    return msg


# --- media -------------------------------------------------------------------------

def image_bytes(width: int, height: int, fmt: str = "PNG",
                color=(120, 30, 200)) -> bytes:
    img = Image.new("RGB", (width, height), color)
    if fmt == "GIF":
        img = img.convert("P")
    buf = io.BytesIO()
    img.save(buf, format=fmt)
    return buf.getvalue()


def wav_bytes(seconds: float = 0.05, rate: int = 8000) -> bytes:
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(b"\x01\x00" * int(rate * seconds))
    return buf.getvalue()


def mp4_bytes(duration_s: float, timescale: int = 1000, version: int = 0) -> bytes:
    """Minimal ftyp + moov(mvhd) container carrying only a duration."""
    ftyp = struct.pack(">I4s4sI4s", 20, b"ftyp", b"isom", 0, b"isom")
    duration = round(duration_s * timescale)
    if version == 1:
        body = bytes([1]) + b"\x00" * 3 + struct.pack(">QQIQ", 0, 0, timescale, duration)
        body += b"\x00" * (112 - len(body) + 8 - 8)
        mvhd = struct.pack(">I4s", 8 + len(body), b"mvhd") + body
    else:
        body = bytes([0]) + b"\x00" * 3 + struct.pack(">IIII", 0, 0, timescale, duration)
        body += b"\x00" * 80  # rate, volume, reserved, matrix, predefined, next track
        mvhd = struct.pack(">I4s", 8 + len(body), b"mvhd") + body
    moov = struct.pack(">I4s", 8 + len(mvhd), b"moov") + mvhd
    return ftyp + moov
