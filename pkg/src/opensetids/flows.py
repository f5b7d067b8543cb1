"""
Capture parsing, bidirectional flow assembly and attack-window labeling.

Only classic libpcap files with an Ethernet link layer are read. Packets
that are not IPv4 TCP/UDP (or are fragmented or cut short) are skipped and
tallied in an optional :class:`collections.Counter`.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import ipaddress
import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from typing import BinaryIO, Iterable, Sequence

from .errors import BadMagic, DataError, TruncatedHeader

BENIGN = "BENIGN"
UNLABELED = "UNLABELED"

DEFAULT_IDLE_TIMEOUT = 64.0

LINKTYPE_ETHERNET = 1
_ETH_IPV4 = 0x0800
_ETH_VLAN = (0x8100, 0x88A8)

# TCP flag bits, in the auxiliary-feature column order
FIN, SYN, RST, PSH, ACK, URG, ECE, CWR = (1 << i for i in range(8))


class Protocol(IntEnum):
    TCP = 6
    UDP = 17


@dataclass(frozen=True)
class RawPacket:
    timestamp: float
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: Protocol
    payload: bytes = b""
    tcp_seq: int | None = None
    tcp_ack: int | None = None
    tcp_flags: int | None = None
    tcp_window: int | None = None

    def __post_init__(self):
        for port in (self.src_port, self.dst_port):
            if not 0 <= port <= 0xFFFF:
                raise ValueError(f"port out of range: {port}")
        tcp_fields = (self.tcp_seq, self.tcp_ack, self.tcp_flags, self.tcp_window)
        if self.protocol == Protocol.TCP:
            if any(f is None for f in tcp_fields):
                raise ValueError("TCP packet requires seq, ack, flags and window")
        elif any(f is not None for f in tcp_fields):
            raise ValueError("UDP packet must not carry TCP fields")

    @property
    def src(self) -> tuple[str, int]:
        return (self.src_ip, self.src_port)

    @property
    def dst(self) -> tuple[str, int]:
        return (self.dst_ip, self.dst_port)

    def has_flags(self, mask: int) -> bool:
        return bool((self.tcp_flags or 0) & mask)


def _endpoint_order(endpoint: tuple[str, int]):
    return (int(ipaddress.IPv4Address(endpoint[0])), endpoint[1])


@dataclass(frozen=True, order=True)
class FlowKey:
    """Direction-free 5-tuple: the numerically smaller (ip, port) comes first."""

    protocol: Protocol
    ip_a: str
    port_a: int
    ip_b: str
    port_b: int

    @classmethod
    def from_packet(cls, pkt: RawPacket) -> "FlowKey":
        a, b = pkt.src, pkt.dst
        if _endpoint_order(b) < _endpoint_order(a):
            a, b = b, a
        return cls(Protocol(pkt.protocol), a[0], a[1], b[0], b[1])

    @property
    def endpoint_a(self) -> tuple[str, int]:
        return (self.ip_a, self.port_a)

    @property
    def endpoint_b(self) -> tuple[str, int]:
        return (self.ip_b, self.port_b)

    def __str__(self):
        return f"{self.protocol.name}:{self.ip_a}:{self.port_a}-{self.ip_b}:{self.port_b}"


@dataclass
class Flow:
    key: FlowKey
    initiator: tuple[str, int]
    packets: list[RawPacket] = field(default_factory=list)
    label: str = UNLABELED

    @property
    def start_time(self) -> float:
        return self.packets[0].timestamp

    @property
    def end_time(self) -> float:
        return self.packets[-1].timestamp

    @property
    def responder(self) -> tuple[str, int]:
        a, b = self.key.endpoint_a, self.key.endpoint_b
        return b if self.initiator == a else a

    def __len__(self):
        return len(self.packets)


@dataclass(frozen=True)
class AttackRecord:
    src_ip: str
    dst_ip: str
    start_time: float
    end_time: float
    label: str

    def __post_init__(self):
        if self.start_time > self.end_time:
            raise ValueError(f"record starts after it ends: {self}")
        if not self.label:
            raise ValueError("record label must be nonempty")


# --------------------------------------------------------------------------
# capture parsing

_MAGICS = {
    b"\xd4\xc3\xb2\xa1": ("<", 1e-6),
    b"\xa1\xb2\xc3\xd4": (">", 1e-6),
    b"\x4d\x3c\xb2\xa1": ("<", 1e-9),
    b"\xa1\xb2\x3c\x4d": (">", 1e-9),
}


def parse_capture(data: bytes | BinaryIO, skipped: Counter | None = None) -> list[RawPacket]:
    """Decode a libpcap capture into IPv4 TCP/UDP packets, in file order.

    ``skipped`` (if given) is incremented by reason for every record that is
    not returned.
    """
    if not isinstance(data, (bytes, bytearray, memoryview)):
        data = data.read()
    data = bytes(data)
    if skipped is None:
        skipped = Counter()
    if len(data) < 24:
        if len(data) >= 4 and data[:4] not in _MAGICS:
            raise BadMagic(f"unrecognized capture magic {data[:4].hex()}")
        raise TruncatedHeader("capture shorter than its 24-byte global header")
    try:
        endian, ts_unit = _MAGICS[data[:4]]
    except KeyError:
        raise BadMagic(f"unrecognized capture magic {data[:4].hex()}") from None
    linktype = struct.unpack(endian + "I", data[20:24])[0] & 0x0FFFFFFF
    if linktype != LINKTYPE_ETHERNET:
        raise DataError(f"unsupported link type {linktype}; only Ethernet is read")

    rec_header = struct.Struct(endian + "IIII")
    packets = []
    pos = 24
    while pos < len(data):
        if pos + rec_header.size > len(data):
            raise TruncatedHeader(f"capture ends inside a record header at byte {pos}")
        ts_sec, ts_frac, incl_len, _ = rec_header.unpack_from(data, pos)
        pos += rec_header.size
        frame = data[pos:pos + incl_len]
        pos += incl_len
        if len(frame) < incl_len:
            skipped["truncated"] += 1
            break
        timestamp = round(ts_sec + ts_frac * ts_unit, 9)
        pkt = _decode_frame(frame, timestamp, skipped)
        if pkt is not None:
            packets.append(pkt)
    return packets


def _decode_frame(frame: bytes, timestamp: float, skipped: Counter) -> RawPacket | None:
    if len(frame) < 14:
        skipped["truncated"] += 1
        return None
    ethertype = struct.unpack_from("!H", frame, 12)[0]
    offset = 14
    while ethertype in _ETH_VLAN:
        if len(frame) < offset + 4:
            skipped["truncated"] += 1
            return None
        ethertype = struct.unpack_from("!H", frame, offset + 2)[0]
        offset += 4
    if ethertype == 0x86DD:
        skipped["ipv6"] += 1
        return None
    if ethertype != _ETH_IPV4:
        skipped["non_ip"] += 1
        return None

    ip = frame[offset:]
    if len(ip) < 20 or ip[0] >> 4 != 4:
        skipped["truncated" if len(ip) < 20 else "non_ip"] += 1
        return None
    ihl = (ip[0] & 0x0F) * 4
    total_len, frag = struct.unpack_from("!H2xH", ip, 2)
    proto = ip[9]
    if ihl < 20 or len(ip) < ihl:
        skipped["truncated"] += 1
        return None
    if frag & 0x2000 or frag & 0x1FFF:
        skipped["fragmented"] += 1
        return None
    if proto not in (Protocol.TCP, Protocol.UDP):
        skipped["non_tcp_udp"] += 1
        return None
    if total_len < ihl or total_len > len(ip):
        skipped["truncated"] += 1
        return None
    src_ip = str(ipaddress.IPv4Address(ip[12:16]))
    dst_ip = str(ipaddress.IPv4Address(ip[16:20]))
    seg = ip[ihl:total_len]  # drops Ethernet trailer padding

    if proto == Protocol.TCP:
        if len(seg) < 20:
            skipped["truncated"] += 1
            return None
        sport, dport, seq, ack, off_flags, window = struct.unpack_from("!HHIIHH", seg)
        data_off = (off_flags >> 12) * 4
        if data_off < 20 or data_off > len(seg):
            skipped["truncated"] += 1
            return None
        return RawPacket(timestamp, src_ip, dst_ip, sport, dport, Protocol.TCP,
                         bytes(seg[data_off:]), seq, ack, off_flags & 0xFF, window)

    if len(seg) < 8:
        skipped["truncated"] += 1
        return None
    sport, dport, udp_len = struct.unpack_from("!HHH", seg)
    if udp_len < 8 or udp_len > len(seg):
        udp_len = len(seg)
    return RawPacket(timestamp, src_ip, dst_ip, sport, dport, Protocol.UDP, bytes(seg[8:udp_len]))


def encode_frame(pkt: RawPacket, ttl: int = 64) -> bytes:
    """Ethernet/IPv4/TCP-or-UDP frame for a packet (zeroed MACs and checksums)."""
    if pkt.protocol == Protocol.TCP:
        seg = struct.pack("!HHIIHHHH", pkt.src_port, pkt.dst_port, pkt.tcp_seq, pkt.tcp_ack,
                          (5 << 12) | pkt.tcp_flags, pkt.tcp_window, 0, 0) + pkt.payload
    else:
        seg = struct.pack("!HHHH", pkt.src_port, pkt.dst_port, 8 + len(pkt.payload), 0) + pkt.payload
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(seg), 0, 0, ttl, int(pkt.protocol), 0,
                     _ip_bytes(pkt.src_ip), _ip_bytes(pkt.dst_ip))
    return b"\x00" * 12 + struct.pack("!H", _ETH_IPV4) + ip + seg


def write_capture(packets: Iterable[RawPacket], sink: BinaryIO | None = None) -> bytes:
    """Write packets as a little-endian, microsecond libpcap file."""
    buf = io.BytesIO()
    buf.write(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))
    for pkt in packets:
        frame = encode_frame(pkt)
        sec = int(pkt.timestamp)
        usec = int(round((pkt.timestamp - sec) * 1e6))
        if usec >= 1_000_000:
            sec, usec = sec + 1, usec - 1_000_000
        buf.write(struct.pack("<IIII", sec, usec, len(frame), len(frame)))
        buf.write(frame)
    out = buf.getvalue()
    if sink is not None:
        sink.write(out)
    return out


# --------------------------------------------------------------------------
# flow assembly and labeling


def _starts_new_connection(pkt: RawPacket) -> bool:
    return pkt.protocol == Protocol.TCP and pkt.has_flags(SYN) and not pkt.has_flags(ACK)


def assemble_flows(packets: Iterable[RawPacket],
                   idle_timeout: float = DEFAULT_IDLE_TIMEOUT) -> list[Flow]:
    """Group packets into bidirectional flows.

    A key's packet run is cut when the gap to the previous packet exceeds
    ``idle_timeout`` or when a bare SYN (no ACK) arrives on a running flow.
    Flows are returned ordered by start time, ties by creation order.
    """
    if idle_timeout < 0:
        raise ValueError("idle_timeout must be non-negative")
    ordered = sorted(packets, key=lambda p: p.timestamp)
    active: dict[FlowKey, Flow] = {}
    flows: list[Flow] = []
    for pkt in ordered:
        key = FlowKey.from_packet(pkt)
        flow = active.get(key)
        if flow is not None and (pkt.timestamp - flow.end_time > idle_timeout
                                 or _starts_new_connection(pkt)):
            flow = None
        if flow is None:
            flow = Flow(key=key, initiator=pkt.src)
            active[key] = flow
            flows.append(flow)
        flow.packets.append(pkt)
    return flows


def label_flows(flows: Sequence[Flow], records: Sequence[AttackRecord]) -> list[Flow]:
    """Return copies of ``flows`` labeled from attack windows (default BENIGN).

    A record matches when its host pair equals the flow's host pair in either
    direction and the flow starts inside the record's closed time window. The
    latest-starting matching record wins; equal starts go to the earlier record.
    """
    by_hosts: dict[frozenset, list[AttackRecord]] = {}
    for rec in records:
        by_hosts.setdefault(frozenset((rec.src_ip, rec.dst_ip)), []).append(rec)

    out = []
    for flow in flows:
        hosts = frozenset((flow.initiator[0], flow.responder[0]))
        best = None
        for rec in by_hosts.get(hosts, ()):
            if rec.start_time <= flow.start_time <= rec.end_time:
                if best is None or rec.start_time > best.start_time:
                    best = rec
        out.append(dataclasses.replace(flow, packets=list(flow.packets),
                                       label=best.label if best else BENIGN))
    return out


def read_attack_records(source) -> list[AttackRecord]:
    """Read ``src_ip,dst_ip,start_time,end_time,label`` CSV rows."""
    if isinstance(source, str) and "\n" in source:
        handle = io.StringIO(source)
    elif isinstance(source, io.IOBase):
        handle = source
    else:
        handle = open(source, newline="")
    with handle:
        reader = csv.DictReader(handle)
        expected = ["src_ip", "dst_ip", "start_time", "end_time", "label"]
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != expected:
            raise DataError(f"attack CSV header must be {','.join(expected)}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            try:
                records.append(AttackRecord(
                    row["src_ip"].strip(), row["dst_ip"].strip(),
                    float(row["start_time"]), float(row["end_time"]),
                    row["label"].strip()))
            except (TypeError, ValueError) as exc:
                raise DataError(f"attack CSV line {lineno}: {exc}") from None
    return records


# --------------------------------------------------------------------------
# flow container
#
# Layout (all integers little-endian):
#   magic        8 bytes  b"OSIDFLW\x00"
#   version      u32
#   manifest_len u32, followed by a UTF-8 JSON manifest
#   one record per flow:
#     protocol u8 | ip_a 4s | port_a u16 | ip_b 4s | port_b u16
#     initiator_is_a u8 | label_len u16 | label utf-8 | n_packets u32
#     per packet:
#       timestamp f64 | from_a u8 | seq u32 | ack u32 | flags u8 | window u16
#       payload_len u32 | payload bytes
#   UDP packets store zeros in the TCP slots.

FLOW_MAGIC = b"OSIDFLW\x00"
FLOW_FORMAT_VERSION = 1

_FLOW_HEAD = struct.Struct("<B4sH4sHBH")
_PKT_HEAD = struct.Struct("<dBIIBHI")


def _ip_bytes(ip: str) -> bytes:
    return ipaddress.IPv4Address(ip).packed


def write_flows(flows: Sequence[Flow], sink: BinaryIO | None = None) -> bytes:
    """Serialize flows to the container format; returns the bytes written."""
    manifest = {
        "format": "opensetids-flows",
        "version": FLOW_FORMAT_VERSION,
        "flow_count": len(flows),
        "packet_count": sum(len(f.packets) for f in flows),
        "byte_order": "little",
        "flow_record": "protocol:u8 ip_a:4s port_a:u16 ip_b:4s port_b:u16 "
                       "initiator_is_a:u8 label_len:u16 label n_packets:u32",
        "packet_record": "timestamp:f64 from_a:u8 seq:u32 ack:u32 flags:u8 "
                         "window:u16 payload_len:u32 payload",
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(FLOW_MAGIC)
    buf.write(struct.pack("<II", FLOW_FORMAT_VERSION, len(manifest_bytes)))
    buf.write(manifest_bytes)
    for flow in flows:
        k = flow.key
        label = flow.label.encode()
        buf.write(_FLOW_HEAD.pack(int(k.protocol), _ip_bytes(k.ip_a), k.port_a,
                                  _ip_bytes(k.ip_b), k.port_b,
                                  int(flow.initiator == k.endpoint_a), len(label)))
        buf.write(label)
        buf.write(struct.pack("<I", len(flow.packets)))
        for p in flow.packets:
            buf.write(_PKT_HEAD.pack(p.timestamp, int(p.src == k.endpoint_a),
                                     p.tcp_seq or 0, p.tcp_ack or 0, p.tcp_flags or 0,
                                     p.tcp_window or 0, len(p.payload)))
            buf.write(p.payload)
    out = buf.getvalue()
    if sink is not None:
        sink.write(out)
    return out


def read_flows(source: bytes | BinaryIO) -> list[Flow]:
    """Inverse of :func:`write_flows`."""
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    view = memoryview(data)
    if bytes(view[:8]) != FLOW_MAGIC:
        raise BadMagic("not a flow container")
    try:
        version, mlen = struct.unpack_from("<II", view, 8)
        if version != FLOW_FORMAT_VERSION:
            raise DataError(f"unsupported flow container version {version}")
        manifest = json.loads(bytes(view[16:16 + mlen]))
        pos = 16 + mlen
        flows = []
        for _ in range(manifest["flow_count"]):
            proto, ia, pa, ib, pb, init_a, llen = _FLOW_HEAD.unpack_from(view, pos)
            pos += _FLOW_HEAD.size
            label = bytes(view[pos:pos + llen]).decode()
            pos += llen
            (n,) = struct.unpack_from("<I", view, pos)
            pos += 4
            protocol = Protocol(proto)
            a = (str(ipaddress.IPv4Address(ia)), pa)
            b = (str(ipaddress.IPv4Address(ib)), pb)
            key = FlowKey(protocol, a[0], a[1], b[0], b[1])
            packets = []
            for _ in range(n):
                ts, from_a, seq, ack, flags, win, plen = _PKT_HEAD.unpack_from(view, pos)
                pos += _PKT_HEAD.size
                payload = bytes(view[pos:pos + plen])
                if len(payload) != plen:
                    raise DataError("flow container truncated inside a payload")
                pos += plen
                src, dst = (a, b) if from_a else (b, a)
                if protocol == Protocol.TCP:
                    packets.append(RawPacket(ts, src[0], dst[0], src[1], dst[1], protocol,
                                             payload, seq, ack, flags, win))
                else:
                    packets.append(RawPacket(ts, src[0], dst[0], src[1], dst[1], protocol, payload))
            flows.append(Flow(key, a if init_a else b, packets, label))
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"corrupt flow container: {exc}") from None
    return flows
