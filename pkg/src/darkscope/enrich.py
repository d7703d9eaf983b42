"""Scanner annotation from local snapshots and interpretation groupings.

Geolocation and origin-AS come from ``prefix,value`` CSV snapshots looked up
by longest-prefix match.  Host intelligence (open ports, tags) comes from a
Censys-style JSON Lines snapshot.
"""

from __future__ import annotations

import csv
import datetime as dt
import ipaddress
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

from .ingest import TrafficClass, read_jsonl

UNKNOWN_COUNTRY = "--"
UNKNOWN_ASN = "AS0"


class PrefixTable:
    """Immutable longest-prefix-match table over IPv4 CIDR prefixes."""

    def __init__(self, entries: Iterable[tuple[str, str]] = ()):
        by_len: dict[int, dict[int, str]] = {}
        for prefix, value in entries:
            net = ipaddress.IPv4Network(prefix, strict=False)
            by_len.setdefault(net.prefixlen, {})[int(net.network_address)] = value
        self._by_len = by_len
        self._lengths = sorted(by_len, reverse=True)

    def __len__(self) -> int:
        return sum(len(t) for t in self._by_len.values())

    def lookup(self, ip: str | int, default: str | None = None) -> str | None:
        addr = int(ipaddress.IPv4Address(ip))
        for plen in self._lengths:
            mask = (0xFFFFFFFF << (32 - plen)) & 0xFFFFFFFF
            hit = self._by_len[plen].get(addr & mask)
            if hit is not None:
                return hit
        return default

    @classmethod
    def from_csv(cls, path: str | Path) -> "PrefixTable":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"prefix", "value"} <= set(reader.fieldnames):
                raise ValueError(f"{path}: expected header 'prefix,value'")
            return cls((row["prefix"], row["value"]) for row in reader)


def lookup(table: PrefixTable, ip: str | int) -> str | None:
    return table.lookup(ip)


def write_prefix_csv(path: str | Path, entries: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prefix", "value"])
        w.writerows(entries)


@dataclass(frozen=True)
class CensysRecord:
    ip: str
    open_ports: frozenset[int] = frozenset()
    tags: frozenset[str] = frozenset()

    @classmethod
    def from_dict(cls, d: Mapping) -> "CensysRecord":
        return cls(
            ip=str(ipaddress.IPv4Address(d["ip"])),
            open_ports=frozenset(int(p) for p in d.get("open_ports", ())),
            tags=frozenset(str(t).lower() for t in d.get("tags", ())),
        )

    def to_dict(self) -> dict:
        return {"ip": self.ip, "open_ports": sorted(self.open_ports), "tags": sorted(self.tags)}


def load_censys(path: str | Path) -> dict[str, CensysRecord]:
    out = {}
    for d in read_jsonl(path):
        rec = CensysRecord.from_dict(d)
        out[rec.ip] = rec
    return out


_DATE_RE = re.compile(r"(\d{4})-?(\d{2})-?(\d{2})")


def select_snapshot(paths: Iterable[str | Path], day: dt.date) -> Path | None:
    """Latest snapshot whose file name carries a date on or before ``day``."""
    best = None
    for p in paths:
        m = _DATE_RE.search(Path(p).name)
        if not m:
            continue
        d = dt.date(*map(int, m.groups()))
        if d <= day and (best is None or d > best[0]):
            best = (d, Path(p))
    return None if best is None else best[1]


# Table of interpretation groupings.  Port regexes are searched unanchored
# in the decimal port string: '\d+3389\d+' never matches 3389 itself.
DARKNET_PORTS = {
    "web": {80, 443, 81},
    "remote": {22, 23},
    "mssql": {1433},
    "samba": {445},
    "quote": {17},
    "amplification": {123, 53, 161, 137, 1900, 19, 27960, 27015},
}
DARKNET_REGEX = {
    "rdp": re.compile(r"\d+3389\d+"),
    "p2p": re.compile(r"17\d\d\d"),
}
CENSYS_TAGS = {
    "web": {"http", "https"},
    "remote": {"ssh", "telnet", "remote"},
    "mssql": {"mssql"},
    "samba": {"smb"},
    "embedded": {"embedded", "dsl", "model", "iot"},
    "mgmt": {"cwmp", "snmp"},
    "storage": {"ftp", "nas"},
    "amplification": {"dns", "ntp", "memcache"},
}


@dataclass(frozen=True)
class GroupingTags:
    darknet_web: bool = False
    darknet_remote: bool = False
    darknet_mssql: bool = False
    darknet_samba: bool = False
    darknet_rdp: bool = False
    darknet_quote: bool = False
    darknet_p2p: bool = False
    darknet_amplification: bool = False
    censys_web: bool = False
    censys_remote: bool = False
    censys_mssql: bool = False
    censys_samba: bool = False
    censys_embedded: bool = False
    censys_mgmt: bool = False
    censys_storage: bool = False
    censys_amplification: bool = False
    scanning: bool = False
    backscatter: bool = False
    udp: bool = False
    unknown: bool = False

    @staticmethod
    def names() -> list[str]:
        """Display names, e.g. 'darknet:web', in field order."""
        return [f.name.replace("_", ":", 1) if f.name.startswith(("darknet_", "censys_")) else f.name
                for f in fields(GroupingTags)]

    def as_dict(self) -> dict[str, bool]:
        return dict(zip(self.names(), (getattr(self, f.name) for f in fields(self))))

    @classmethod
    def from_dict(cls, d: Mapping[str, bool]) -> "GroupingTags":
        return cls(*(bool(d.get(n, False)) for n in cls.names()))


def grouping_tags(ports_scanned: Iterable[int], censys: CensysRecord | None,
                  classes: Iterable[TrafficClass | str]) -> GroupingTags:
    ports = set(int(p) for p in ports_scanned)
    port_strs = [str(p) for p in ports]
    values: dict[str, bool] = {}
    for name, members in DARKNET_PORTS.items():
        values[f"darknet_{name}"] = bool(ports & members)
    for name, rx in DARKNET_REGEX.items():
        values[f"darknet_{name}"] = any(rx.search(s) for s in port_strs)
    tags = censys.tags if censys is not None else frozenset()
    for name, members in CENSYS_TAGS.items():
        values[f"censys_{name}"] = bool(tags & members)
    cls_set = {TrafficClass(c) for c in classes}
    values["scanning"] = TrafficClass.SCANNING in cls_set
    values["backscatter"] = TrafficClass.BACKSCATTER in cls_set
    values["udp"] = TrafficClass.UDP in cls_set
    values["unknown"] = TrafficClass.UNKNOWN in cls_set
    return GroupingTags(**values)


@dataclass
class Annotations:
    """Lookup sources used when building scanner profiles."""

    geo: PrefixTable | None = None
    asn: PrefixTable | None = None
    censys: Mapping[str, CensysRecord] | None = None

    def country(self, ip: str) -> str:
        return self.geo.lookup(ip, UNKNOWN_COUNTRY) if self.geo else UNKNOWN_COUNTRY

    def origin_asn(self, ip: str) -> str:
        return self.asn.lookup(ip, UNKNOWN_ASN) if self.asn else UNKNOWN_ASN

    def host(self, ip: str) -> CensysRecord | None:
        return self.censys.get(ip) if self.censys else None

    @classmethod
    def load(cls, geo=None, asn=None, censys=None) -> "Annotations":
        return cls(
            geo=PrefixTable.from_csv(geo) if geo else None,
            asn=PrefixTable.from_csv(asn) if asn else None,
            censys=load_censys(censys) if censys else None,
        )
