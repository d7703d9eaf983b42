"""Daily scanner profiles and their fixed-width encodings.

Profiles aggregate one source's events over a UTC day.  ``FeatureSchema``
freezes everything needed to encode profiles reproducibly (top-u value
lists, numeric scaler parameters, thermometer bin edges), so a schema fitted
on one day can encode any other day.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .enrich import UNKNOWN_ASN, UNKNOWN_COUNTRY, Annotations, GroupingTags, grouping_tags
from .ingest import DarknetEvent, TrafficClass, ip_to_int, protocol_name, read_jsonl, write_jsonl

log = logging.getLogger(__name__)

NUMERIC_COLUMNS = (
    "total_packets",
    "total_bytes",
    "total_lifetime",
    "num_ports",
    "avg_lifetime",
    "avg_packet_size",
    "min_unique_dsts",
    "max_unique_dsts",
    "min_unique_dst24",
    "max_unique_dst24",
)
CATEGORICAL_FAMILIES = ("ports", "protocols", "censys_ports", "censys_tags")
DEFAULT_U = 100
DEFAULT_BINS = 10


@dataclass
class ScannerProfile:
    src_ip: str
    day: dt.date
    total_packets: int
    total_bytes: int
    total_lifetime: float
    num_ports: int
    avg_lifetime: float
    avg_packet_size: float
    min_unique_dsts: int
    max_unique_dsts: int
    min_unique_dst24: int
    max_unique_dst24: int
    num_events: int = 1
    protocols: frozenset[str] = frozenset()
    ports: frozenset[int] = frozenset()
    censys_ports: frozenset[int] = frozenset()
    censys_tags: frozenset[str] = frozenset()
    country: str = UNKNOWN_COUNTRY
    asn: str = UNKNOWN_ASN
    grouping: GroupingTags = field(default_factory=GroupingTags)
    mirai: bool = False
    zmap: bool = False
    masscan: bool = False
    class_mix: dict[str, int] = field(default_factory=dict)

    def numeric(self) -> list[float]:
        return [float(getattr(self, c)) for c in NUMERIC_COLUMNS]

    def family(self, name: str) -> frozenset:
        return getattr(self, name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["day"] = self.day.isoformat()
        for k in CATEGORICAL_FAMILIES:
            d[k] = sorted(d[k])
        d["grouping"] = self.grouping.as_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScannerProfile":
        d = dict(d)
        d["day"] = dt.date.fromisoformat(d["day"])
        for k in CATEGORICAL_FAMILIES:
            d[k] = frozenset(d.get(k, ()))
        d["grouping"] = GroupingTags.from_dict(d.get("grouping", {}))
        return cls(**d)


def utc_day(ts: float) -> dt.date:
    return dt.datetime.fromtimestamp(ts, dt.timezone.utc).date()


def aggregate_daily(events: Iterable[DarknetEvent],
                    annotations: Annotations | None = None) -> list[ScannerProfile]:
    """One profile per (src_ip, UTC day of first_seen), sorted by day then address."""
    ann = annotations or Annotations()
    groups: dict[tuple, list[DarknetEvent]] = defaultdict(list)
    for ev in events:
        groups[(utc_day(ev.first_seen), ev.key.src_ip)].append(ev)

    profiles = []
    for (day, ip) in sorted(groups, key=lambda k: (k[0], ip_to_int(k[1]))):
        evs = groups[(day, ip)]
        packets = sum(e.packets for e in evs)
        nbytes = sum(e.bytes for e in evs)
        total_life = sum(e.lifetime for e in evs)
        ports = frozenset(e.key.dst_port for e in evs)
        mix: Counter = Counter()
        for e in evs:
            mix[e.key.traffic_class.value] += e.packets
        host = ann.host(ip)
        profiles.append(ScannerProfile(
            src_ip=ip,
            day=day,
            total_packets=packets,
            total_bytes=nbytes,
            total_lifetime=total_life,
            num_ports=len(ports),
            avg_lifetime=total_life / len(evs),
            avg_packet_size=nbytes / packets,
            min_unique_dsts=min(e.unique_dsts for e in evs),
            max_unique_dsts=max(e.unique_dsts for e in evs),
            min_unique_dst24=min(e.unique_dst24 for e in evs),
            max_unique_dst24=max(e.unique_dst24 for e in evs),
            num_events=len(evs),
            protocols=frozenset(protocol_name(e.protocol) for e in evs),
            ports=ports,
            censys_ports=host.open_ports if host else frozenset(),
            censys_tags=host.tags if host else frozenset(),
            country=ann.country(ip),
            asn=ann.origin_asn(ip),
            grouping=grouping_tags(ports, host, (TrafficClass(c) for c in mix)),
            mirai=any(e.mirai_packets > 0 for e in evs),
            zmap=any(e.zmap_packets > 0 for e in evs),
            masscan=any(e.masscan_packets > 0 for e in evs),
            class_mix=dict(sorted(mix.items())),
        ))
    return profiles


def top_values(sets: Iterable[Iterable], u: int) -> list:
    """The u values present in the most sets; ties by ascending value."""
    if u < 1:
        raise ValueError("u must be >= 1")
    counts: Counter = Counter()
    for s in sets:
        counts.update(set(s))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [v for v, _ in ranked[:u]]


@dataclass
class ThermometerBins:
    edges: dict[str, list[float]]
    degenerate: list[str] = field(default_factory=list)


def log2_edges(lo: float, hi: float, n_bins: int) -> list[float]:
    """n_bins geometric edges starting at lo with ratio (hi/lo)**(1/n_bins)."""
    step = math.log2(hi / lo) / n_bins
    return [lo * 2.0 ** (k * step) for k in range(n_bins)]


def fit_bins(profiles: Sequence[ScannerProfile], bins_per_feature: int = DEFAULT_BINS) -> ThermometerBins:
    """Log-spaced edges per numeric feature between its min positive value and max.

    A feature without two distinct positive values gets a single edge and is
    listed in ``degenerate``.
    """
    if bins_per_feature < 2:
        raise ValueError("bins_per_feature must be >= 2")
    values = np.array([p.numeric() for p in profiles], dtype=float).reshape(-1, len(NUMERIC_COLUMNS))
    return fit_bins_array(values, NUMERIC_COLUMNS, bins_per_feature)


def fit_bins_array(values: np.ndarray, names: Sequence[str], bins_per_feature: int) -> ThermometerBins:
    edges: dict[str, list[float]] = {}
    degenerate = []
    for j, name in enumerate(names):
        col = values[:, j]
        pos = col[col > 0]
        if pos.size == 0 or pos.min() == pos.max():
            edges[name] = [float(pos.min()) if pos.size else 1.0]
            degenerate.append(name)
            log.warning("feature %s has a single positive value; degenerate thermometer bin", name)
            continue
        edges[name] = log2_edges(float(pos.min()), float(pos.max()), bins_per_feature)
    return ThermometerBins(edges, degenerate)


def thermometer(value: float, edges: Sequence[float]) -> np.ndarray:
    """Bit k is 1 iff value >= edges[k]; negative values encode as all zeros."""
    e = np.asarray(edges, dtype=float)
    if value < 0:
        return np.zeros(e.size)
    return (value >= e).astype(float)


@dataclass
class FeatureSchema:
    u: int
    mode: str
    top_ports: list[int]
    top_protocols: list[str]
    top_censys_ports: list[int]
    top_censys_tags: list[str]
    numeric_columns: list[str] = field(default_factory=lambda: list(NUMERIC_COLUMNS))
    scaler_min: list[float] = field(default_factory=list)
    scaler_max: list[float] = field(default_factory=list)
    bins: dict[str, list[float]] = field(default_factory=dict)

    def vocab(self, family: str) -> list:
        return getattr(self, "top_" + family)

    @property
    def columns(self) -> list[str]:
        cols = []
        if self.mode == "thermo":
            for name in self.numeric_columns:
                cols += [f"{name}>={e:.6g}#{k}" for k, e in enumerate(self.bins[name])]
        else:
            cols += list(self.numeric_columns)
        for fam in CATEGORICAL_FAMILIES:
            cols += [f"{fam}={v}" for v in self.vocab(fam)] + [f"{fam}=other"]
        return cols

    @property
    def total_width(self) -> int:
        return len(self.columns)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["columns"] = self.columns
        d["total_width"] = self.total_width
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        d = {k: v for k, v in d.items() if k not in ("columns", "total_width", "fingerprint")}
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        d = self.to_dict()
        d["fingerprint"] = self.fingerprint()
        Path(path).write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_schema(profiles: Sequence[ScannerProfile], u: int = DEFAULT_U, mode: str = "onehot",
                 bins: int = DEFAULT_BINS) -> FeatureSchema:
    if not profiles:
        raise ValueError("cannot build a schema from zero profiles")
    if mode not in ("onehot", "thermo"):
        raise ValueError(f"unknown mode {mode!r}")
    logs = np.log1p(np.array([p.numeric() for p in profiles], dtype=float))
    schema = FeatureSchema(
        u=u,
        mode=mode,
        top_ports=top_values((p.ports for p in profiles), u),
        top_protocols=top_values((p.protocols for p in profiles), u),
        top_censys_ports=top_values((p.censys_ports for p in profiles), u),
        top_censys_tags=top_values((p.censys_tags for p in profiles), u),
        scaler_min=logs.min(axis=0).tolist(),
        scaler_max=logs.max(axis=0).tolist(),
    )
    if mode == "thermo":
        schema.bins = fit_bins(profiles, bins).edges
    return schema


def vectorize(profile: ScannerProfile, schema: FeatureSchema) -> np.ndarray:
    parts: list[np.ndarray] = []
    raw = np.array(profile.numeric(), dtype=float)
    if schema.mode == "thermo":
        parts += [thermometer(v, schema.bins[n]) for v, n in zip(raw, schema.numeric_columns)]
    else:
        lo = np.array(schema.scaler_min)
        span = np.array(schema.scaler_max) - lo
        span[span == 0] = 1.0
        parts.append((np.log1p(raw) - lo) / span)
    for fam in CATEGORICAL_FAMILIES:
        vocab = schema.vocab(fam)
        have = profile.family(fam)
        block = np.array([1.0 if v in have else 0.0 for v in vocab] + [0.0])
        if any(v not in set(vocab) for v in have):
            block[-1] = 1.0
        parts.append(block)
    return np.concatenate(parts)


@dataclass
class FeatureMatrix:
    values: np.ndarray
    row_ids: list[str]
    columns: list[str]
    schema: FeatureSchema | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def to_csv(self, path: str | Path) -> None:
        write_matrix_csv(path, self.row_ids, self.columns, self.values)

    @classmethod
    def from_csv(cls, path: str | Path, schema: FeatureSchema | None = None) -> "FeatureMatrix":
        ids, cols, values = read_matrix_csv(path)
        return cls(values, ids, cols, schema)


def featurize(profiles: Sequence[ScannerProfile], schema: FeatureSchema) -> FeatureMatrix:
    width = schema.total_width
    values = np.zeros((len(profiles), width))
    for i, p in enumerate(profiles):
        values[i] = vectorize(p, schema)
    return FeatureMatrix(values, [p.src_ip for p in profiles], schema.columns, schema)


# raw numeric features used for tree interpretation
INTERPRET_NUMERIC = NUMERIC_COLUMNS


def interpret_rows(profiles: Sequence[ScannerProfile]) -> tuple[np.ndarray, list[str], list[bool]]:
    """Design matrix for decision trees: raw numeric features then grouping booleans."""
    tag_names = GroupingTags.names()
    cols = list(INTERPRET_NUMERIC) + tag_names
    is_tag = [False] * len(INTERPRET_NUMERIC) + [True] * len(tag_names)
    X = np.zeros((len(profiles), len(cols)))
    for i, p in enumerate(profiles):
        X[i, : len(INTERPRET_NUMERIC)] = p.numeric()
        X[i, len(INTERPRET_NUMERIC):] = [float(b) for b in p.grouping.as_dict().values()]
    return X, cols, is_tag


def _fmt(v: float) -> str:
    if v == int(v) and abs(v) < 2**53:
        return str(int(v))
    return repr(float(v))


def write_matrix_csv(path: str | Path, ids: Sequence[str], columns: Sequence[str],
                     values: np.ndarray, id_name: str = "src_ip") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([id_name, *columns])
        for rid, row in zip(ids, np.asarray(values, dtype=float)):
            w.writerow([rid, *(_fmt(v) for v in row)])


def read_matrix_csv(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        ids, rows = [], []
        for rec in reader:
            ids.append(rec[0])
            rows.append([float(v) for v in rec[1:]])
    values = np.array(rows, dtype=float).reshape(len(rows), len(header) - 1)
    return ids, header[1:], values


def read_profiles(path: str | Path) -> list[ScannerProfile]:
    return [ScannerProfile.from_dict(d) for d in read_jsonl(path)]


def write_profiles(path: str | Path, profiles: Iterable[ScannerProfile]) -> int:
    return write_jsonl(path, (p.to_dict() for p in profiles))
