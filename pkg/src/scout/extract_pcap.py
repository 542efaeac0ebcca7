"""Classic pcap parsing and per-packet text rendering.

Raw captures lose their structure when dumped straight into a prompt, so each
packet is decoded (Ethernet/IP/UDP/TCP/ICMP, plus DNS on udp/53) and rendered
as one annotated summary line. Decoding is total: malformed bytes degrade to
a hex-preview note, never an exception.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from ipaddress import IPv6Address

from .errors import BadMagic, TruncatedGlobalHeader, UnsupportedVersion
from .gateway import TextChunk

_GLOBAL_HEADER_LEN = 24
_RECORD_HEADER_LEN = 16

# magic -> (endianness prefix for struct, timestamp resolution)
_MAGICS = {
    b"\xa1\xb2\xc3\xd4": (">", "micro"),
    b"\xd4\xc3\xb2\xa1": ("<", "micro"),
    b"\xa1\xb2\x3c\x4d": (">", "nano"),
    b"\x4d\x3c\xb2\xa1": ("<", "nano"),
}

LINKTYPE_ETHERNET = 1

ICMP_NAMES = {
    0: "echo-reply",
    3: "dest-unreachable",
    5: "redirect",
    8: "echo-request",
    11: "time-exceeded",
}

_QTYPE_NAMES = {1: "A", 2: "NS", 5: "CNAME", 6: "SOA", 12: "PTR",
                15: "MX", 16: "TXT", 28: "AAAA", 255: "ANY"}


@dataclass(frozen=True)
class EthernetInfo:
    src_mac: str
    dst_mac: str
    ethertype: int


@dataclass(frozen=True)
class IpInfo:
    version: int
    src_addr: str
    dst_addr: str
    protocol: int


@dataclass(frozen=True)
class TransportInfo:
    kind: str  # "TCP" | "UDP" | "ICMP"
    src_port: int | None = None
    dst_port: int | None = None
    icmp_type: int | None = None
    icmp_code: int | None = None


@dataclass(frozen=True)
class DnsQuestion:
    name: str
    qtype: int


@dataclass(frozen=True)
class DnsAnswer:
    name: str
    rtype: int
    rdata_text: str


@dataclass(frozen=True)
class DnsMessage:
    id: int
    is_response: bool
    questions: tuple[DnsQuestion, ...]
    answers: tuple[DnsAnswer, ...]


@dataclass(frozen=True)
class DecodedLayers:
    eth: EthernetInfo | None = None
    ip: IpInfo | None = None
    transport: TransportInfo | None = None
    dns: DnsMessage | None = None
    raw_note: str | None = None


@dataclass(frozen=True)
class PcapPacket:
    index: int  # 1-based, file order
    ts_sec: int
    ts_frac: int
    captured_len: int
    original_len: int
    layers: DecodedLayers


@dataclass(frozen=True)
class PcapFile:
    byte_order: str       # "LE" | "BE"
    ts_resolution: str    # "micro" | "nano"
    version: tuple[int, int]
    link_type: int
    packets: tuple[PcapPacket, ...]
    truncation_note: str | None = None


def parse_pcap(data: bytes) -> PcapFile:
    """Parse a classic pcap savefile (all four magics).

    Stops cleanly at a truncated trailing record: complete packets are kept
    and the truncation is noted on the file.
    """
    if len(data) < _GLOBAL_HEADER_LEN:
        raise TruncatedGlobalHeader(f"{len(data)} bytes, need {_GLOBAL_HEADER_LEN}")
    magic = data[:4]
    if magic not in _MAGICS:
        raise BadMagic(magic.hex())
    endian, resolution = _MAGICS[magic]
    major, minor, _thiszone, _sigfigs, _snaplen, link_type = struct.unpack(
        endian + "HHiIII", data[4:_GLOBAL_HEADER_LEN])
    if (major, minor) != (2, 4):
        raise UnsupportedVersion(f"pcap version {major}.{minor}")

    packets: list[PcapPacket] = []
    truncation_note = None
    offset = _GLOBAL_HEADER_LEN
    record_fmt = endian + "IIII"
    while offset < len(data):
        if offset + _RECORD_HEADER_LEN > len(data):
            truncation_note = f"truncated record header at byte {offset}"
            break
        ts_sec, ts_frac, incl_len, orig_len = struct.unpack(
            record_fmt, data[offset:offset + _RECORD_HEADER_LEN])
        payload_start = offset + _RECORD_HEADER_LEN
        if payload_start + incl_len > len(data):
            truncation_note = f"truncated packet payload at byte {offset}"
            break
        payload = data[payload_start:payload_start + incl_len]
        packets.append(PcapPacket(
            index=len(packets) + 1,
            ts_sec=ts_sec,
            ts_frac=ts_frac,
            captured_len=len(payload),
            original_len=orig_len,
            layers=decode_packet(link_type, payload),
        ))
        offset = payload_start + incl_len

    return PcapFile(
        byte_order="BE" if endian == ">" else "LE",
        ts_resolution=resolution,
        version=(major, minor),
        link_type=link_type,
        packets=tuple(packets),
        truncation_note=truncation_note,
    )


def _undecoded_note(remaining: bytes) -> str:
    preview = remaining[:16].hex()
    return f"undecoded: {len(remaining)} bytes, hex preview {preview}"


def _mac(raw: bytes) -> str:
    return ":".join(f"{b:02x}" for b in raw)


def decode_packet(link_type: int, payload: bytes) -> DecodedLayers:
    """Best-effort layered decode; never raises on malformed bytes."""
    if link_type != LINKTYPE_ETHERNET:
        return DecodedLayers(raw_note=_undecoded_note(payload))
    if len(payload) < 14:
        return DecodedLayers(raw_note=_undecoded_note(payload))

    eth = EthernetInfo(
        dst_mac=_mac(payload[0:6]),
        src_mac=_mac(payload[6:12]),
        ethertype=struct.unpack(">H", payload[12:14])[0],
    )
    rest = payload[14:]
    if eth.ethertype == 0x0800:
        return _decode_ipv4(eth, rest)
    if eth.ethertype == 0x86DD:
        return _decode_ipv6(eth, rest)
    return DecodedLayers(eth=eth, raw_note=_undecoded_note(rest))


def _decode_ipv4(eth: EthernetInfo, data: bytes) -> DecodedLayers:
    if len(data) < 20 or data[0] >> 4 != 4:
        return DecodedLayers(eth=eth, raw_note=_undecoded_note(data))
    ihl = (data[0] & 0x0F) * 4
    if ihl < 20 or len(data) < ihl:
        return DecodedLayers(eth=eth, raw_note=_undecoded_note(data))
    ip = IpInfo(
        version=4,
        src_addr=".".join(str(b) for b in data[12:16]),
        dst_addr=".".join(str(b) for b in data[16:20]),
        protocol=data[9],
    )
    return _decode_transport(eth, ip, data[ihl:])


def _decode_ipv6(eth: EthernetInfo, data: bytes) -> DecodedLayers:
    if len(data) < 40 or data[0] >> 4 != 6:
        return DecodedLayers(eth=eth, raw_note=_undecoded_note(data))
    ip = IpInfo(
        version=6,
        src_addr=str(IPv6Address(data[8:24])),
        dst_addr=str(IPv6Address(data[24:40])),
        protocol=data[6],
    )
    return _decode_transport(eth, ip, data[40:])


def _decode_transport(eth: EthernetInfo, ip: IpInfo, data: bytes) -> DecodedLayers:
    if ip.protocol in (1, 58):  # ICMP / ICMPv6
        if len(data) < 2:
            return DecodedLayers(eth=eth, ip=ip, raw_note=_undecoded_note(data))
        transport = TransportInfo(kind="ICMP", icmp_type=data[0], icmp_code=data[1])
        return DecodedLayers(eth=eth, ip=ip, transport=transport)
    if ip.protocol == 6:  # TCP
        if len(data) < 4:
            return DecodedLayers(eth=eth, ip=ip, raw_note=_undecoded_note(data))
        sport, dport = struct.unpack(">HH", data[:4])
        transport = TransportInfo(kind="TCP", src_port=sport, dst_port=dport)
        return DecodedLayers(eth=eth, ip=ip, transport=transport)
    if ip.protocol == 17:  # UDP
        if len(data) < 8:
            return DecodedLayers(eth=eth, ip=ip, raw_note=_undecoded_note(data))
        sport, dport = struct.unpack(">HH", data[:4])
        transport = TransportInfo(kind="UDP", src_port=sport, dst_port=dport)
        dns = None
        if 53 in (sport, dport):
            dns = decode_dns(data[8:])
        return DecodedLayers(eth=eth, ip=ip, transport=transport, dns=dns)
    return DecodedLayers(eth=eth, ip=ip, raw_note=_undecoded_note(data))


# --- DNS ------------------------------------------------------------------

def decode_dns(payload: bytes) -> DnsMessage | None:
    """Decode a DNS message, or None when the payload is not DNS.

    Compression pointers are followed with a visited-offset set; loops and
    out-of-range offsets reject the whole message.
    """
    if len(payload) < 12:
        return None
    msg_id, flags, qdcount, ancount = struct.unpack(">HHHH", payload[:8])
    # Cheapest possible encodings are 5 bytes per question, 11 per answer.
    if 5 * qdcount + 11 * ancount > len(payload) - 12:
        return None
    try:
        offset = 12
        questions = []
        for _ in range(qdcount):
            name, offset = _read_name(payload, offset)
            if offset + 4 > len(payload):
                raise ValueError("question overruns payload")
            qtype = struct.unpack(">H", payload[offset:offset + 2])[0]
            offset += 4  # qtype + qclass
            questions.append(DnsQuestion(name=name, qtype=qtype))
        answers = []
        for _ in range(ancount):
            name, offset = _read_name(payload, offset)
            if offset + 10 > len(payload):
                raise ValueError("answer overruns payload")
            rtype, _rclass, _ttl, rdlen = struct.unpack(
                ">HHIH", payload[offset:offset + 10])
            offset += 10
            if offset + rdlen > len(payload):
                raise ValueError("rdata overruns payload")
            rdata = payload[offset:offset + rdlen]
            answers.append(DnsAnswer(
                name=name, rtype=rtype,
                rdata_text=_render_rdata(payload, offset, rtype, rdata),
            ))
            offset += rdlen
    except ValueError:
        return None
    return DnsMessage(
        id=msg_id,
        is_response=bool(flags >> 15),
        questions=tuple(questions),
        answers=tuple(answers),
    )


def _read_name(data: bytes, offset: int) -> tuple[str, int]:
    labels: list[str] = []
    visited: set[int] = set()
    end: int | None = None  # position after the name in the original stream
    pos = offset
    while True:
        if pos in visited:
            raise ValueError("compression pointer loop")
        visited.add(pos)
        if pos >= len(data):
            raise ValueError("name overruns payload")
        length = data[pos]
        if length == 0:
            if end is None:
                end = pos + 1
            break
        if length & 0xC0 == 0xC0:
            if pos + 1 >= len(data):
                raise ValueError("dangling compression pointer")
            target = ((length & 0x3F) << 8) | data[pos + 1]
            if target >= len(data):
                raise ValueError("compression pointer out of range")
            if end is None:
                end = pos + 2
            pos = target
            continue
        if length & 0xC0:
            raise ValueError(f"reserved label type 0x{length & 0xC0:02x}")
        if pos + 1 + length > len(data):
            raise ValueError("label overruns payload")
        labels.append(data[pos + 1:pos + 1 + length].decode("latin-1").lower())
        if len(labels) > 127:
            raise ValueError("too many labels")
        pos += 1 + length
    return ".".join(labels), end


def _render_rdata(message: bytes, rdata_offset: int, rtype: int, rdata: bytes) -> str:
    if rtype == 1 and len(rdata) == 4:
        return ".".join(str(b) for b in rdata)
    if rtype == 28 and len(rdata) == 16:
        return str(IPv6Address(rdata))
    if rtype == 5:
        try:
            # CNAME targets may use compression into the enclosing message.
            name, _ = _read_name(message, rdata_offset)
            return name
        except ValueError:
            pass
    return f"rtype {rtype}, {len(rdata)} bytes"


def qtype_name(qtype: int) -> str:
    return _QTYPE_NAMES.get(qtype, str(qtype))


# --- rendering --------------------------------------------------------------

def _packet_timestamp(packet: PcapPacket, resolution: str) -> str:
    micros = packet.ts_frac // 1000 if resolution == "nano" else packet.ts_frac
    try:
        moment = datetime.fromtimestamp(packet.ts_sec, tz=timezone.utc)
        moment = moment.replace(microsecond=min(micros, 999_999))
        return moment.isoformat()
    except (OverflowError, OSError, ValueError):
        return f"ts={packet.ts_sec}.{packet.ts_frac}"


def _endpoint(layers: DecodedLayers, side: str) -> str:
    if layers.ip:
        addr = layers.ip.src_addr if side == "src" else layers.ip.dst_addr
        t = layers.transport
        if t and t.kind in ("TCP", "UDP"):
            port = t.src_port if side == "src" else t.dst_port
            return f"{addr}:{port}"
        return addr
    if layers.eth:
        return layers.eth.src_mac if side == "src" else layers.eth.dst_mac
    return "?"


def _dns_summary(dns: DnsMessage) -> str:
    if dns.is_response:
        parts = [f"{a.name} {qtype_name(a.rtype)}={a.rdata_text}" for a in dns.answers]
        names = ", ".join(q.name for q in dns.questions)
        body = "; ".join(parts) if parts else "no answers"
        return f"response {names}: {body}" if names else f"response: {body}"
    parts = [f"{q.name} {qtype_name(q.qtype)}" for q in dns.questions]
    return "query " + ("; ".join(parts) if parts else "(empty)")


def render_packet_line(packet: PcapPacket, resolution: str = "micro") -> str:
    layers = packet.layers
    ts = _packet_timestamp(packet, resolution)
    src = _endpoint(layers, "src")
    dst = _endpoint(layers, "dst")

    if layers.dns:
        proto, summary = "DNS", _dns_summary(layers.dns)
    elif layers.transport and layers.transport.kind == "ICMP":
        t = layers.transport
        name = ICMP_NAMES.get(t.icmp_type, f"type-{t.icmp_type}")
        proto = "ICMP"
        summary = f"ICMP {name} (type {t.icmp_type}, code {t.icmp_code})"
    elif layers.transport:
        proto = layers.transport.kind
        summary = f"len {packet.captured_len}"
    elif layers.eth:
        proto = f"eth:0x{layers.eth.ethertype:04x}"
        summary = layers.raw_note or ""
    else:
        proto = "raw"
        summary = layers.raw_note or ""
    return f"#{packet.index} {ts} {src}->{dst} {proto} {summary}".rstrip()


def render_packets(pcap: PcapFile, budget: int) -> list[TextChunk]:
    """Render each packet as one line and pack lines greedily under budget.

    Packet order is preserved across chunks and each chunk carries its packet
    index range. A line that alone exceeds the budget becomes its own chunk
    (packet summaries are never dropped or split).
    """
    if budget <= 0:
        raise ValueError("budget must be > 0")
    max_bytes = 4 * budget  # estimate(text) <= budget iff utf-8 length <= 4*budget
    chunks: list[TextChunk] = []
    lines: list[str] = []
    size = 0
    first_index = None

    def flush(last_index: int):
        if lines:
            chunks.append(TextChunk(
                text="".join(lines),
                index=len(chunks),
                ref=f"packets {first_index}-{last_index}",
            ))

    prev_index = 0
    for packet in pcap.packets:
        line = render_packet_line(packet, pcap.ts_resolution) + "\n"
        line_bytes = len(line.encode("utf-8"))
        if lines and size + line_bytes > max_bytes:
            flush(prev_index)
            lines, size = [line], line_bytes
            first_index = packet.index
        else:
            if not lines:
                first_index = packet.index
            lines.append(line)
            size += line_bytes
        prev_index = packet.index
    flush(prev_index)
    return chunks
