"""Capture ingestion: pcap / pcap-ng parsing, TCP reassembly and message framing.

Only Ethernet + IPv4 + TCP is understood. Everything else is counted and skipped.
"""

from __future__ import annotations

import enum
import ipaddress
import logging
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

log = logging.getLogger(__name__)

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
PCAPNG_SHB = 0x0A0D0D0A
PCAPNG_IDB = 0x00000001
PCAPNG_EPB = 0x00000006
PCAPNG_BYTE_ORDER = 0x1A2B3C4D

PCAP_GLOBAL_HEADER_LEN = 24
PCAP_RECORD_HEADER_LEN = 16
ETHERNET_HEADER_LEN = 14
WRITE_SNAPLEN = 262144

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10


class MalformedCapture(ValueError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.detail = message
        self.offset = offset


class UnsupportedLinkType(ValueError):
    pass


class FramingViolation(ValueError):
    pass


class LinkType(enum.IntEnum):
    ETHERNET = 1


class Direction(enum.Enum):
    CLIENT_TO_SERVER = "c2s"
    SERVER_TO_CLIENT = "s2c"

    @property
    def reverse(self) -> "Direction":
        if self is Direction.CLIENT_TO_SERVER:
            return Direction.SERVER_TO_CLIENT
        return Direction.CLIENT_TO_SERVER


@dataclass(frozen=True)
class PacketRecord:
    timestamp: int  # ns since epoch
    data: bytes
    link_type: LinkType = LinkType.ETHERNET

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("negative timestamp")
        if self.link_type == LinkType.ETHERNET and len(self.data) < ETHERNET_HEADER_LEN:
            raise ValueError(f"ethernet frame of {len(self.data)} bytes is shorter than its header")


@dataclass(frozen=True)
class Message:
    direction: Direction
    timestamp: int
    payload: bytes
    index: int

    def __post_init__(self):
        if not self.payload:
            raise ValueError("message payload must be non-empty")


Endpoint = tuple[str, int]


@dataclass(frozen=True)
class TcpSession:
    session_id: str
    client: Endpoint
    server: Endpoint
    messages: tuple[Message, ...]
    syn_seen: bool = True

    def stream(self, direction: Direction) -> bytes:
        return b"".join(m.payload for m in self.messages if m.direction is direction)

    def payloads(self, direction: Optional[Direction] = None) -> list[bytes]:
        return [m.payload for m in self.messages if direction is None or m.direction is direction]


@dataclass(frozen=True)
class LengthFieldSpec:
    """Location of a length field holding the total message length."""

    offset: int
    width: int
    byteorder: str = "big"

    def __post_init__(self):
        if self.width not in (1, 2, 4):
            raise ValueError(f"unsupported length field width {self.width}")
        if self.byteorder not in ("big", "little"):
            raise ValueError(f"byteorder must be 'big' or 'little', not {self.byteorder!r}")
        if self.offset < 0:
            raise ValueError("negative length field offset")

    @property
    def end(self) -> int:
        return self.offset + self.width

    @property
    def max_value(self) -> int:
        return (1 << (8 * self.width)) - 1

    def decode(self, buf: bytes) -> int:
        return int.from_bytes(buf[self.offset:self.end], self.byteorder)

    def encode(self, value: int) -> bytes:
        return value.to_bytes(self.width, self.byteorder)


# ---------------------------------------------------------------------------
# file formats


def read_capture(file_bytes: bytes) -> list[PacketRecord]:
    """Parse a classic pcap or pcap-ng file into packet records in file order."""
    if len(file_bytes) < 4:
        raise MalformedCapture("file too short for a magic number", 0)
    if struct.unpack_from("<I", file_bytes, 0)[0] == PCAPNG_SHB:
        return _read_pcapng(file_bytes)
    for endian in "<>":
        magic = struct.unpack_from(endian + "I", file_bytes, 0)[0]
        if magic in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
            return _read_pcap(file_bytes, endian, nanos=magic == PCAP_MAGIC_NS)
    raise MalformedCapture(f"bad magic 0x{file_bytes[:4].hex()}", 0)


def _read_pcap(buf: bytes, endian: str, nanos: bool) -> list[PacketRecord]:
    if len(buf) < PCAP_GLOBAL_HEADER_LEN:
        raise MalformedCapture("truncated pcap global header", 0)
    network = struct.unpack_from(endian + "I", buf, 20)[0]
    if network != LinkType.ETHERNET:
        raise UnsupportedLinkType(f"pcap link type {network} is not Ethernet")
    scale = 1 if nanos else 1000
    records = []
    pos = PCAP_GLOBAL_HEADER_LEN
    while pos < len(buf):
        if pos + PCAP_RECORD_HEADER_LEN > len(buf):
            raise MalformedCapture("truncated record header", pos)
        sec, frac, incl, _orig = struct.unpack_from(endian + "IIII", buf, pos)
        body = pos + PCAP_RECORD_HEADER_LEN
        if body + incl > len(buf):
            raise MalformedCapture(f"record claims {incl} bytes past end of file", pos)
        records.append(_record(sec * 1_000_000_000 + frac * scale, buf[body:body + incl], pos))
        pos = body + incl
    return records


def _record(ts: int, data: bytes, offset: int) -> PacketRecord:
    try:
        return PacketRecord(ts, bytes(data))
    except ValueError as exc:
        raise MalformedCapture(str(exc), offset) from None


def _read_pcapng(buf: bytes) -> list[PacketRecord]:
    records = []
    endian = "<"
    interfaces: list[int] = []
    pos = 0
    while pos < len(buf):
        if pos + 12 > len(buf):
            raise MalformedCapture("truncated block header", pos)
        btype = struct.unpack_from(endian + "I", buf, pos)[0]
        if btype == PCAPNG_SHB:
            bom = buf[pos + 8:pos + 12]
            if struct.unpack("<I", bom)[0] == PCAPNG_BYTE_ORDER:
                endian = "<"
            elif struct.unpack(">I", bom)[0] == PCAPNG_BYTE_ORDER:
                endian = ">"
            else:
                raise MalformedCapture("bad section byte-order magic", pos + 8)
            interfaces = []
        total = struct.unpack_from(endian + "I", buf, pos + 4)[0]
        if total < 12 or total % 4 or pos + total > len(buf):
            raise MalformedCapture(f"inconsistent block length {total}", pos)
        trailer = struct.unpack_from(endian + "I", buf, pos + total - 4)[0]
        if trailer != total:
            raise MalformedCapture(f"block trailer length {trailer} != {total}", pos)
        body = buf[pos + 8:pos + total - 4]
        if btype == PCAPNG_IDB:
            if len(body) < 8:
                raise MalformedCapture("truncated interface description", pos)
            interfaces.append(struct.unpack_from(endian + "H", body, 0)[0])
        elif btype == PCAPNG_EPB:
            if len(body) < 20:
                raise MalformedCapture("truncated enhanced packet block", pos)
            iface, hi, lo, caplen, _orig = struct.unpack_from(endian + "IIIII", body, 0)
            if iface >= len(interfaces):
                raise MalformedCapture(f"packet references unknown interface {iface}", pos)
            if interfaces[iface] != LinkType.ETHERNET:
                raise UnsupportedLinkType(f"pcap-ng link type {interfaces[iface]} is not Ethernet")
            if 20 + caplen > len(body):
                raise MalformedCapture("packet data overruns its block", pos)
            # interface options (if_tsresol included) are ignored: microseconds assumed
            records.append(_record(((hi << 32) | lo) * 1000, body[20:20 + caplen], pos))
        pos += total
    return records


def write_capture(records: Iterable[PacketRecord]) -> bytes:
    """Serialize records as a little-endian classic pcap (µs resolution, Ethernet)."""
    out = [struct.pack("<IHHiIII", PCAP_MAGIC_US, 2, 4, 0, 0, WRITE_SNAPLEN, LinkType.ETHERNET)]
    for rec in records:
        if rec.link_type != LinkType.ETHERNET:
            raise ValueError("write_capture only handles Ethernet records")
        sec, rem = divmod(rec.timestamp, 1_000_000_000)
        out.append(struct.pack("<IIII", sec, rem // 1000, len(rec.data), len(rec.data)))
        out.append(rec.data)
    return b"".join(out)


# ---------------------------------------------------------------------------
# frame decoding


@dataclass(frozen=True)
class TcpSegment:
    timestamp: int
    src: Endpoint
    dst: Endpoint
    seq: int
    ack: int
    flags: int
    payload: bytes


@dataclass
class ReassemblyStats:
    frames: int = 0
    tcp_segments: int = 0
    non_ipv4: int = 0
    non_tcp: int = 0
    fragments: int = 0
    malformed: int = 0
    duplicate_bytes: int = 0


def decode_tcp(record: PacketRecord, stats: Optional[ReassemblyStats] = None) -> Optional[TcpSegment]:
    stats = stats if stats is not None else ReassemblyStats()
    data = record.data
    ethertype = struct.unpack_from("!H", data, 12)[0]
    off = ETHERNET_HEADER_LEN
    if ethertype == 0x8100 and len(data) >= 18:
        ethertype = struct.unpack_from("!H", data, 16)[0]
        off = 18
    if ethertype != 0x0800:
        stats.non_ipv4 += 1
        return None
    if len(data) < off + 20 or data[off] >> 4 != 4:
        stats.malformed += 1
        return None
    ihl = (data[off] & 0x0F) * 4
    total_len = struct.unpack_from("!H", data, off + 2)[0]
    frag = struct.unpack_from("!H", data, off + 6)[0]
    if ihl < 20 or total_len < ihl or len(data) < off + total_len:
        stats.malformed += 1
        return None
    if frag & 0x2000 or frag & 0x1FFF:
        stats.fragments += 1
        return None
    if data[off + 9] != 6:
        stats.non_tcp += 1
        return None
    src = str(ipaddress.IPv4Address(data[off + 12:off + 16]))
    dst = str(ipaddress.IPv4Address(data[off + 16:off + 20]))
    tcp = off + ihl
    end = off + total_len  # drops ethernet padding
    if end - tcp < 20:
        stats.malformed += 1
        return None
    sport, dport, seq, ack, doff_flags = struct.unpack_from("!HHIIH", data, tcp)
    doff = (doff_flags >> 12) * 4
    if doff < 20 or tcp + doff > end:
        stats.malformed += 1
        return None
    stats.tcp_segments += 1
    return TcpSegment(record.timestamp, (src, sport), (dst, dport), seq, ack,
                      doff_flags & 0x3F, data[tcp + doff:end])


# ---------------------------------------------------------------------------
# reassembly


@dataclass
class _Flow:
    order: int
    segments: list[tuple[int, TcpSegment]] = field(default_factory=list)
    client: Optional[Endpoint] = None
    has_payload: bool = False


def reassemble(records: Iterable[PacketRecord], stats: Optional[ReassemblyStats] = None) -> list[TcpSession]:
    """Group TCP segments into sessions; one Message per surviving payload segment."""
    stats = stats if stats is not None else ReassemblyStats()
    open_flows: dict[frozenset, _Flow] = {}
    flows: list[_Flow] = []
    for arrival, rec in enumerate(records):
        stats.frames += 1
        seg = decode_tcp(rec, stats)
        if seg is None:
            continue
        key = frozenset((seg.src, seg.dst))
        syn_only = seg.flags & TCP_SYN and not seg.flags & TCP_ACK
        flow = open_flows.get(key)
        if flow is None or (syn_only and flow.has_payload):
            flow = _Flow(order=len(flows))
            flows.append(flow)
            open_flows[key] = flow
        if syn_only and flow.client is None:
            flow.client = seg.src
        flow.segments.append((arrival, seg))
        flow.has_payload |= bool(seg.payload)

    sessions = []
    for flow in flows:
        session = _build_session(flow, stats)
        if session is not None:
            sessions.append(session)
    if stats.fragments or stats.malformed:
        log.info("reassembly skipped %d fragments, %d malformed frames", stats.fragments, stats.malformed)
    return sessions


def _build_session(flow: _Flow, stats: ReassemblyStats) -> Optional[TcpSession]:
    ends = {s.src for _, s in flow.segments} | {s.dst for _, s in flow.segments}
    if len(ends) != 2:
        return None
    if flow.client is not None:
        client = flow.client
        server = next(e for e in ends if e != client)
    else:
        # lower port is the server; address breaks ties
        server, client = sorted(ends, key=lambda e: (e[1], ipaddress.IPv4Address(e[0])))

    pieces = []  # (delivery_ts, arrival, direction, payload)
    for direction, src in ((Direction.CLIENT_TO_SERVER, client), (Direction.SERVER_TO_CLIENT, server)):
        segs = [(a, s) for a, s in flow.segments if s.src == src]
        syn = next((s for _, s in segs if s.flags & TCP_SYN), None)
        data = [(a, s) for a, s in segs if s.payload]
        if not data:
            continue
        base = (syn.seq + 1) if syn is not None else data[0][1].seq
        rel = []
        for a, s in data:
            delta = (s.seq - base) & 0xFFFFFFFF
            if delta >= 1 << 31:
                delta -= 1 << 32
            rel.append((delta, a, s))
        rel.sort(key=lambda t: (t[0], t[1]))
        covered = rel[0][0]
        delivered = 0
        for start, arrival, s in rel:
            stop = start + len(s.payload)
            if stop <= covered:
                stats.duplicate_bytes += len(s.payload)
                continue
            payload = s.payload
            if start < covered:
                stats.duplicate_bytes += covered - start
                payload = payload[covered - start:]
            covered = stop
            delivered = max(delivered, s.timestamp)
            pieces.append((delivered, arrival, direction, payload))

    if not pieces:
        return None
    pieces.sort(key=lambda p: (p[0], p[1]))
    messages = tuple(Message(d, ts, p, i) for i, (ts, _, d, p) in enumerate(pieces))
    sid = f"{client[0]}:{client[1]}-{server[0]}:{server[1]}#{flow.order}"
    return TcpSession(sid, client, server, messages, syn_seen=flow.client is not None)


def segment_messages(session: TcpSession, framing: Optional[LengthFieldSpec] = None) -> TcpSession:
    """Re-split each direction's byte stream at declared message lengths.

    Without a framing spec the per-segment messages are kept as they are.
    """
    if framing is None:
        return session
    pieces = []  # (timestamp, order, direction, payload)
    for direction in Direction:
        segs = [m for m in session.messages if m.direction is direction]
        if not segs:
            continue
        stream = b"".join(m.payload for m in segs)
        seg_end = []  # cumulative end offset of each segment
        acc = 0
        for m in segs:
            acc += len(m.payload)
            seg_end.append(acc)
        pos = 0
        k = 0
        while pos < len(stream):
            if pos + framing.end > len(stream):
                raise FramingViolation(
                    f"{direction.value} stream ends inside a length field at offset {pos}")
            declared = framing.decode(stream[pos:])
            if declared < framing.end:
                raise FramingViolation(
                    f"declared length {declared} at offset {pos} cannot cover its own length field")
            if pos + declared > len(stream):
                raise FramingViolation(
                    f"declared length {declared} at offset {pos} exceeds the "
                    f"{len(stream) - pos} bytes left in the {direction.value} stream")
            last = pos + declared - 1
            while seg_end[k] <= last:
                k += 1
            pieces.append((segs[k].timestamp, segs[k].index, direction, stream[pos:pos + declared]))
            pos += declared
    pieces.sort(key=lambda p: (p[0], p[1]))
    messages = tuple(Message(d, ts, p, i) for i, (ts, _, d, p) in enumerate(pieces))
    return replace(session, messages=messages)


# ---------------------------------------------------------------------------
# synthesis (fixtures and recorded mock sessions)


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _mac(ip: str) -> bytes:
    return b"\x02\x00" + ipaddress.IPv4Address(ip).packed


def build_tcp_frame(src: Endpoint, dst: Endpoint, seq: int, ack: int, flags: int,
                    payload: bytes = b"", ip_id: int = 0, window: int = 65535) -> bytes:
    """Ethernet/IPv4/TCP frame with valid checksums."""
    sip = ipaddress.IPv4Address(src[0]).packed
    dip = ipaddress.IPv4Address(dst[0]).packed
    tcp = struct.pack("!HHIIHHHH", src[1], dst[1], seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                      (5 << 12) | flags, window, 0, 0)
    pseudo = sip + dip + struct.pack("!BBH", 0, 6, len(tcp) + len(payload))
    csum = _checksum(pseudo + tcp + payload)
    tcp = tcp[:16] + struct.pack("!H", csum) + tcp[18:]
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(tcp) + len(payload), ip_id & 0xFFFF,
                     0x4000, 64, 6, 0, sip, dip)
    ip = ip[:10] + struct.pack("!H", _checksum(ip)) + ip[12:]
    eth = _mac(dst[0]) + _mac(src[0]) + b"\x08\x00"
    return eth + ip + tcp + payload


class ConversationWriter:
    """Synthesizes the packets of one TCP conversation with consistent seq/ack numbers."""

    def __init__(self, client: Endpoint, server: Endpoint, client_isn: int = 1000, server_isn: int = 5000):
        self.client = client
        self.server = server
        self.records: list[PacketRecord] = []
        self._seq = {Direction.CLIENT_TO_SERVER: client_isn, Direction.SERVER_TO_CLIENT: server_isn}
        self._ip_id = 1

    def _emit(self, ts: int, direction: Direction, flags: int, payload: bytes = b""):
        src, dst = ((self.client, self.server) if direction is Direction.CLIENT_TO_SERVER
                    else (self.server, self.client))
        frame = build_tcp_frame(src, dst, self._seq[direction], self._seq[direction.reverse],
                                flags, payload, self._ip_id)
        self._ip_id += 1
        self.records.append(PacketRecord(ts, frame))
        self._seq[direction] += len(payload) + (1 if flags & (TCP_SYN | TCP_FIN) else 0)

    def open(self, ts: int) -> None:
        c2s, s2c = Direction.CLIENT_TO_SERVER, Direction.SERVER_TO_CLIENT
        self._emit(ts, c2s, TCP_SYN)
        self._emit(ts + 1000, s2c, TCP_SYN | TCP_ACK)
        self._emit(ts + 2000, c2s, TCP_ACK)

    def send(self, ts: int, direction: Direction, payload: bytes) -> None:
        self._emit(ts, direction, TCP_PSH | TCP_ACK, payload)

    def close(self, ts: int) -> None:
        self._emit(ts, Direction.CLIENT_TO_SERVER, TCP_FIN | TCP_ACK)
        self._emit(ts + 1000, Direction.SERVER_TO_CLIENT, TCP_FIN | TCP_ACK)
        self._emit(ts + 2000, Direction.CLIENT_TO_SERVER, TCP_ACK)
