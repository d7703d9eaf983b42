"""Packet records to darknet events.

A darknet event groups packets sharing (source IP, traffic class, flag
signature, destination port).  Events live in an expiring cache: a packet
arriving more than ``timeout`` seconds after the event's last packet closes
the old event and starts a new one.
"""

from __future__ import annotations

import enum
import gzip
import io
import ipaddress
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 600.0
DEFAULT_SLACK = 5.0
SWEEP_INTERVAL = 60.0

# TCP flag bits
FIN, SYN, RST, PSH, ACK, URG, ECE, CWR = 0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80
_FLAG_NAMES = [(SYN, "SYN"), (FIN, "FIN"), (RST, "RST"), (PSH, "PSH"),
               (ACK, "ACK"), (URG, "URG"), (ECE, "ECE"), (CWR, "CWR")]

BACKSCATTER_FLAGS = frozenset({SYN | ACK, RST, RST | ACK, ACK, FIN | ACK})
BACKSCATTER_ICMP_TYPES = frozenset({0, 3, 11})
ZMAP_IP_ID = 54321


class Protocol(enum.IntEnum):
    ICMP = 1
    TCP = 6
    UDP = 17

    @classmethod
    def parse(cls, value) -> int:
        """Protocol number from a name ('TCP') or an integer."""
        if isinstance(value, str):
            name = value.upper()
            if name in cls.__members__:
                return int(cls[name])
            if name.startswith("OTHER"):
                return int(name.strip("OTHER()"))
            return int(value)
        return int(value)


def protocol_name(proto: int) -> str:
    try:
        return Protocol(proto).name
    except ValueError:
        return f"OTHER({proto})"


class TrafficClass(str, enum.Enum):
    SCANNING = "Scanning"
    BACKSCATTER = "Backscatter"
    UDP = "UDP"
    UNKNOWN = "Unknown"


def ip_to_int(ip: str | int) -> int:
    if isinstance(ip, int):
        if not 0 <= ip < 2**32:
            raise ValueError(f"IPv4 integer out of range: {ip}")
        return ip
    return int(ipaddress.IPv4Address(ip))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


@dataclass(frozen=True)
class PacketRecord:
    timestamp: float
    src_ip: str
    dst_ip: str
    protocol: int
    src_port: int = 0
    dst_port: int = 0
    packet_bytes: int = 40
    ip_id: int = 0
    tcp_flags: int | None = None
    tcp_seq: int | None = None
    icmp_type: int | None = None

    def __post_init__(self):
        if self.packet_bytes < 20:
            raise ValueError("packet_bytes must be >= 20")
        is_tcp = self.protocol == Protocol.TCP
        is_icmp = self.protocol == Protocol.ICMP
        if is_tcp != (self.tcp_flags is not None) or is_tcp != (self.tcp_seq is not None):
            raise ValueError("tcp_flags/tcp_seq must be present exactly for TCP")
        if is_icmp != (self.icmp_type is not None):
            raise ValueError("icmp_type must be present exactly for ICMP")
        for name, hi in (("src_port", 0xFFFF), ("dst_port", 0xFFFF), ("ip_id", 0xFFFF)):
            if not 0 <= getattr(self, name) <= hi:
                raise ValueError(f"{name} out of range")
        if is_tcp and not (0 <= self.tcp_flags <= 0xFF and 0 <= self.tcp_seq < 2**32):
            raise ValueError("tcp field out of range")
        if is_icmp and not 0 <= self.icmp_type <= 255:
            raise ValueError("icmp_type out of range")

    @classmethod
    def from_dict(cls, d: dict) -> "PacketRecord":
        proto = Protocol.parse(d["protocol"])
        flags = d.get("tcp_flags")
        if isinstance(flags, str):
            flags = parse_flags(flags)
        return cls(
            timestamp=float(d["timestamp"]),
            src_ip=str(ipaddress.IPv4Address(d["src_ip"])),
            dst_ip=str(ipaddress.IPv4Address(d["dst_ip"])),
            protocol=proto,
            src_port=int(d.get("src_port", 0)),
            dst_port=int(d.get("dst_port", 0)),
            packet_bytes=int(d["packet_bytes"]),
            ip_id=int(d.get("ip_id", 0)),
            tcp_flags=flags,
            tcp_seq=d.get("tcp_seq"),
            icmp_type=d.get("icmp_type"),
        )

    def to_dict(self) -> dict:
        d = {
            "timestamp": self.timestamp,
            "src_ip": self.src_ip,
            "dst_ip": self.dst_ip,
            "protocol": protocol_name(self.protocol),
            "src_port": self.src_port,
            "dst_port": self.dst_port,
            "packet_bytes": self.packet_bytes,
            "ip_id": self.ip_id,
        }
        if self.tcp_flags is not None:
            d["tcp_flags"] = self.tcp_flags
            d["tcp_seq"] = self.tcp_seq
        if self.icmp_type is not None:
            d["icmp_type"] = self.icmp_type
        return d


def parse_flags(text: str) -> int:
    """'SYN-ACK' -> 0x12."""
    names = dict((n, b) for b, n in _FLAG_NAMES)
    value = 0
    for part in text.upper().replace("|", "-").split("-"):
        if part:
            value |= names[part]
    return value


def format_flags(flags: int) -> str:
    parts = [name for bit, name in _FLAG_NAMES if flags & bit]
    return "-".join(parts) if parts else "NONE"


def flags_signature(pkt: PacketRecord) -> str:
    if pkt.protocol == Protocol.TCP:
        return format_flags(pkt.tcp_flags)
    if pkt.protocol == Protocol.ICMP:
        return f"ICMP-{pkt.icmp_type}"
    if pkt.protocol == Protocol.UDP:
        return "UDP"
    return protocol_name(pkt.protocol)


def classify_packet(pkt: PacketRecord) -> TrafficClass:
    if pkt.protocol == Protocol.TCP:
        if pkt.tcp_flags == SYN:
            return TrafficClass.SCANNING
        if pkt.tcp_flags in BACKSCATTER_FLAGS:
            return TrafficClass.BACKSCATTER
        return TrafficClass.UNKNOWN
    if pkt.protocol == Protocol.ICMP:
        if pkt.icmp_type == 8:
            return TrafficClass.SCANNING
        if pkt.icmp_type in BACKSCATTER_ICMP_TYPES:
            return TrafficClass.BACKSCATTER
        return TrafficClass.UNKNOWN
    if pkt.protocol == Protocol.UDP:
        return TrafficClass.UDP
    return TrafficClass.UNKNOWN


def mirai_fingerprint(pkt: PacketRecord) -> bool:
    """TCP sequence number equal to the destination address."""
    if pkt.protocol != Protocol.TCP:
        return False
    return pkt.tcp_seq == ip_to_int(pkt.dst_ip)


def zmap_fingerprint(pkt: PacketRecord) -> bool:
    return pkt.ip_id == ZMAP_IP_ID


def masscan_fingerprint(pkt: PacketRecord) -> bool:
    if pkt.protocol != Protocol.TCP:
        return False
    return pkt.ip_id == (ip_to_int(pkt.dst_ip) ^ pkt.dst_port ^ pkt.tcp_seq) & 0xFFFF


@dataclass(frozen=True, order=True)
class EventKey:
    src_ip: str
    traffic_class: TrafficClass
    flags_signature: str
    dst_port: int

    @classmethod
    def of(cls, pkt: PacketRecord) -> "EventKey":
        return cls(pkt.src_ip, classify_packet(pkt), flags_signature(pkt), pkt.dst_port)


@dataclass
class DarknetEvent:
    key: EventKey
    first_seen: float
    last_seen: float
    packets: int = 0
    bytes: int = 0
    protocol: int = 0
    unique_dsts: int = 0
    unique_dst24: int = 0
    mirai_packets: int = 0
    zmap_packets: int = 0
    masscan_packets: int = 0

    @property
    def lifetime(self) -> float:
        return self.last_seen - self.first_seen

    def to_dict(self) -> dict:
        return {
            "src_ip": self.key.src_ip,
            "traffic_class": self.key.traffic_class.value,
            "flags_signature": self.key.flags_signature,
            "dst_port": self.key.dst_port,
            "protocol": protocol_name(self.protocol),
            "first_seen": self.first_seen,
            "last_seen": self.last_seen,
            "packets": self.packets,
            "bytes": self.bytes,
            "unique_dsts": self.unique_dsts,
            "unique_dst24": self.unique_dst24,
            "mirai_packets": self.mirai_packets,
            "zmap_packets": self.zmap_packets,
            "masscan_packets": self.masscan_packets,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DarknetEvent":
        key = EventKey(d["src_ip"], TrafficClass(d["traffic_class"]),
                       d["flags_signature"], int(d["dst_port"]))
        return cls(
            key=key,
            first_seen=float(d["first_seen"]),
            last_seen=float(d["last_seen"]),
            packets=int(d["packets"]),
            bytes=int(d["bytes"]),
            protocol=Protocol.parse(d.get("protocol", 0)),
            unique_dsts=int(d["unique_dsts"]),
            unique_dst24=int(d["unique_dst24"]),
            mirai_packets=int(d.get("mirai_packets", 0)),
            zmap_packets=int(d.get("zmap_packets", 0)),
            masscan_packets=int(d.get("masscan_packets", 0)),
        )


@dataclass
class _LiveEvent:
    event: DarknetEvent
    dsts: set = field(default_factory=set)
    dst24: set = field(default_factory=set)

    def add(self, pkt: PacketRecord) -> None:
        ev = self.event
        ev.last_seen = pkt.timestamp
        ev.packets += 1
        ev.bytes += pkt.packet_bytes
        dst = ip_to_int(pkt.dst_ip)
        self.dsts.add(dst)
        self.dst24.add(dst >> 8)
        ev.mirai_packets += mirai_fingerprint(pkt)
        ev.zmap_packets += zmap_fingerprint(pkt)
        ev.masscan_packets += masscan_fingerprint(pkt)

    def close(self) -> DarknetEvent:
        self.event.unique_dsts = len(self.dsts)
        self.event.unique_dst24 = len(self.dst24)
        return self.event


class EventCache:
    """Sequential expiring event cache.

    ``push`` returns the events that expired as a consequence of the packet
    (lazy expiry on key access plus a periodic sweep), ``flush`` returns
    everything still live.  Records older than the newest timestamp seen by
    more than ``slack`` seconds are dropped and counted in ``rejected``.
    Records within the slack are accepted with their timestamp clamped to
    the newest seen, keeping event lifetimes monotone.
    """

    def __init__(self, timeout: float = DEFAULT_TIMEOUT, slack: float = DEFAULT_SLACK,
                 sweep_interval: float = SWEEP_INTERVAL):
        self.timeout = timeout
        self.slack = slack
        self.sweep_interval = sweep_interval
        self.live: dict[EventKey, _LiveEvent] = {}
        self.clock = float("-inf")
        self.last_sweep = float("-inf")
        self.accepted = 0
        self.rejected = 0

    def push(self, pkt: PacketRecord) -> list[DarknetEvent]:
        ts = pkt.timestamp
        if ts < self.clock - self.slack:
            self.rejected += 1
            return []
        if ts < self.clock:
            pkt = _with_timestamp(pkt, self.clock)
            ts = self.clock
        self.clock = ts
        self.accepted += 1
        out: list[DarknetEvent] = []
        key = EventKey.of(pkt)
        cur = self.live.get(key)
        if cur is not None and ts - cur.event.last_seen > self.timeout:
            out.append(cur.close())
            cur = None
        if cur is None:
            cur = _LiveEvent(DarknetEvent(key, ts, ts, protocol=pkt.protocol))
            self.live[key] = cur
        cur.add(pkt)
        if ts - self.last_sweep >= self.sweep_interval:
            out.extend(self._sweep(ts))
            self.last_sweep = ts
        return out

    def _sweep(self, now: float) -> list[DarknetEvent]:
        expired = [k for k, e in self.live.items() if now - e.event.last_seen > self.timeout]
        return [self.live.pop(k).close() for k in expired]

    def flush(self) -> list[DarknetEvent]:
        out = [e.close() for e in self.live.values()]
        self.live.clear()
        return out


def _with_timestamp(pkt: PacketRecord, ts: float) -> PacketRecord:
    d = pkt.__dict__.copy()
    d["timestamp"] = ts
    return PacketRecord(**d)


def ingest(packets: Iterable[PacketRecord], timeout: float = DEFAULT_TIMEOUT,
           slack: float = DEFAULT_SLACK, stats: dict | None = None) -> Iterator[DarknetEvent]:
    """Yield darknet events in emission order (expiry order, then flush order).

    Pass a dict as ``stats`` to receive ``accepted``/``rejected`` counts.
    """
    cache = EventCache(timeout, slack)
    for pkt in packets:
        yield from cache.push(pkt)
    yield from cache.flush()
    if cache.rejected:
        log.warning("dropped %d out-of-order records (slack %.1fs)", cache.rejected, slack)
    if stats is not None:
        stats["accepted"] = cache.accepted
        stats["rejected"] = cache.rejected


def ingest_sharded(packets: Iterable[PacketRecord], lanes: int, timeout: float = DEFAULT_TIMEOUT,
                   slack: float = DEFAULT_SLACK) -> list[DarknetEvent]:
    """Run independent caches per src_ip hash lane; returns events sorted canonically.

    Equivalent to ``sorted(ingest(...), key=event_sort_key)`` whenever no
    record is rejected for being out of order.
    """
    caches = [EventCache(timeout, slack) for _ in range(lanes)]
    out: list[DarknetEvent] = []
    for pkt in packets:
        out.extend(caches[ip_to_int(pkt.src_ip) % lanes].push(pkt))
    for c in caches:
        out.extend(c.flush())
    return sorted(out, key=event_sort_key)


def event_sort_key(ev: DarknetEvent):
    k = ev.key
    return (ip_to_int(k.src_ip), k.traffic_class.value, k.flags_signature, k.dst_port, ev.first_seen)


def _open_text(path: str | Path, mode: str = "rt") -> IO[str]:
    path = str(path)
    if path.endswith(".gz"):
        if "w" in mode:
            # mtime=0 keeps compressed output byte-reproducible
            return io.TextIOWrapper(gzip.GzipFile(path, "wb", mtime=0), encoding="utf-8")
        return gzip.open(path, mode, encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def read_jsonl(path: str | Path) -> Iterator[dict]:
    """Parse JSON Lines; gzip input is detected by its magic bytes."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
    opener = gzip.open if magic == b"\x1f\x8b" else open
    with opener(path, "rt", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> int:
    n = 0
    with _open_text(path, "wt") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def read_packets(path: str | Path) -> Iterator[PacketRecord]:
    for d in read_jsonl(path):
        yield PacketRecord.from_dict(d)


def read_events(path: str | Path) -> list[DarknetEvent]:
    return [DarknetEvent.from_dict(d) for d in read_jsonl(path)]
