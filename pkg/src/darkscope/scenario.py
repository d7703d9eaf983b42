"""Labeled synthetic darknet traffic with incident archetypes.

Each day draws a fixed number of scanners per archetype; every scanner emits
packets whose ports, protocol, sizes and timing follow its archetype, with
log-normal packet counts and a small rate of port contamination.  Outbreak
injections multiply an archetype's population from a given day on.
"""

from __future__ import annotations

import csv
import datetime as dt
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import SYN, PacketRecord, Protocol, int_to_ip, ip_to_int, write_jsonl
from .enrich import CensysRecord, write_prefix_csv

DARKNET = ip_to_int("10.0.0.0")
DARKNET_SIZE = 1 << 19  # a /13
DAY_SECONDS = 86400


class Archetype(str, enum.Enum):
    MIRAI_TELNET = "MiraiTelnet"
    SMB_WORM = "SmbWorm"
    CWMP_SSH = "CwmpSsh"
    DNS_AMP = "DnsAmp"
    UDP_SPRAY = "EphemeralUdpSpray"


@dataclass(frozen=True)
class _Variant:
    ports: tuple[int, ...]
    weight: float
    censys_ports: tuple[int, ...]
    censys_tags: tuple[str, ...]


@dataclass(frozen=True)
class _Behaviour:
    protocol: Protocol
    variants: tuple[_Variant, ...]  # empty: random high ports
    log_packets: float  # mean of log packet count
    gap: float  # mean seconds between packets
    sizes: tuple[int, int]  # packet size range, inclusive
    censys_coverage: float
    home: tuple[str, ...]  # source /16s
    countries: tuple[str, ...]
    asns: tuple[str, ...]

    @property
    def port_values(self) -> tuple[int, ...]:
        return tuple(sorted({p for v in self.variants for p in v.ports}))


V = _Variant
BEHAVIOUR = {
    Archetype.MIRAI_TELNET: _Behaviour(
        Protocol.TCP, (V((23, 2323), 1.0, (23,), ("telnet", "embedded")),),
        3.0, 8.0, (40, 40), 1.0,
        ("31.7", "45.160", "177.32", "189.4"), ("BR", "BR", "VN", "CN"),
        ("AS28573", "AS18881", "AS7552", "AS4134")),
    Archetype.SMB_WORM: _Behaviour(
        Protocol.TCP, (V((445,), 0.92, (445,), ("smb",)), V((139,), 0.08, (139,), ("smb",))),
        2.6, 40.0, (52, 52), 1.0,
        ("58.16", "61.52", "115.72", "223.96"), ("CN", "CN", "KR", "IN"),
        ("AS4837", "AS4134", "AS4766", "AS9829")),
    Archetype.CWMP_SSH: _Behaviour(
        Protocol.TCP, (V((22,), 0.9, (7547, 22), ("cwmp",)), V((22, 2222), 0.1, (7547, 22, 2222), ("cwmp",))),
        2.4, 60.0, (60, 60), 1.0,
        ("85.100", "93.40", "176.12", "212.58"), ("DE", "FR", "TR", "IT"),
        ("AS3320", "AS3215", "AS9121", "AS3269")),
    Archetype.DNS_AMP: _Behaviour(
        Protocol.UDP, (V((53,), 0.9, (53,), ("dns",)), V((123,), 0.05, (123,), ("ntp",)),
                       V((1900,), 0.05, (1900,), ("ssdp",))),
        2.8, 20.0, (64, 84), 1.0,
        ("104.16", "162.142", "185.94", "198.20"), ("US", "US", "NL", "GB"),
        ("AS14061", "AS396982", "AS202425", "AS8075")),
    Archetype.UDP_SPRAY: _Behaviour(
        Protocol.UDP, (V((), 1.0, (80, 443), ("http", "https")),),
        3.6, 3.0, (120, 480), 0.95,
        ("23.94", "138.68", "159.203", "167.99"), ("US", "SG", "US", "DE"),
        ("AS16509", "AS14061", "AS63949", "AS24940")),
}

SPRAY_PORTS = (32768, 65535)
SPRAY_COUNT = (8, 24)
LOG_SIGMA = 0.25


@dataclass
class Injection:
    day: int  # 1-based
    archetype: Archetype
    multiplier: float
    duration: int | None = None  # days; None = until the end

    def active(self, day: int) -> bool:
        if day < self.day:
            return False
        return self.duration is None or day < self.day + self.duration

    def to_dict(self) -> dict:
        return {"day": self.day, "archetype": self.archetype.value,
                "multiplier": self.multiplier, "duration": self.duration}


@dataclass
class ScenarioSpec:
    days: int = 30
    population: dict[Archetype, int] = field(default_factory=lambda: {
        Archetype.MIRAI_TELNET: 20,
        Archetype.SMB_WORM: 400,
        Archetype.CWMP_SSH: 300,
        Archetype.DNS_AMP: 250,
        Archetype.UDP_SPRAY: 200,
    })
    injections: list[Injection] = field(default_factory=list)
    seed: int = 0
    start: dt.date = dt.date(2021, 9, 1)
    contamination: float = 0.05
    outbreak_shift: float = 0.5  # extra log packets for injected scanners

    def __post_init__(self):
        if self.days < 1:
            raise ValueError("days must be >= 1")
        self.population = {Archetype(k): int(v) for k, v in self.population.items()}
        if any(v < 0 for v in self.population.values()):
            raise ValueError("populations must be >= 0")
        for inj in self.injections:
            if not 1 <= inj.day <= self.days or inj.multiplier < 0:
                raise ValueError(f"invalid injection {inj}")

    def day_date(self, day: int) -> dt.date:
        return self.start + dt.timedelta(days=day - 1)

    def counts(self, day: int) -> dict[Archetype, tuple[int, int]]:
        """(baseline, injected extra) scanners per archetype on a 1-based day."""
        out = {}
        for arch in Archetype:
            base = self.population.get(arch, 0)
            mult = 1.0
            for inj in self.injections:
                if inj.archetype == arch and inj.active(day):
                    mult *= inj.multiplier
            total = int(round(base * mult))
            out[arch] = (min(base, total), max(total - base, 0))
        return out

    def to_dict(self) -> dict:
        return {
            "days": self.days,
            "start": self.start.isoformat(),
            "seed": self.seed,
            "contamination": self.contamination,
            "outbreak_shift": self.outbreak_shift,
            "population": {a.value: n for a, n in self.population.items()},
            "injections": [i.to_dict() for i in self.injections],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        kw = dict(d)
        if "start" in kw:
            kw["start"] = dt.date.fromisoformat(kw["start"])
        if "population" in kw:
            kw["population"] = {Archetype(k): v for k, v in kw["population"].items()}
        kw["injections"] = [Injection(int(i["day"]), Archetype(i["archetype"]), float(i["multiplier"]),
                                      i.get("duration"))
                            for i in kw.get("injections", ())]
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


@dataclass
class Scanner:
    ip: str
    archetype: Archetype
    injected: bool
    ports: tuple[int, ...]
    n_packets: int
    censys: CensysRecord | None


@dataclass
class ScenarioFiles:
    root: Path
    packets: list[Path]
    truth: Path
    censys: Path
    geo: Path
    asn: Path
    summary: Path

    def day_packets(self, day: int) -> Path:
        return self.packets[day - 1]


def _source_ip(rng: np.random.Generator, beh: _Behaviour, used: set[str]) -> tuple[str, int]:
    while True:
        h = int(rng.integers(len(beh.home)))
        ip = f"{beh.home[h]}.{int(rng.integers(0, 256))}.{int(rng.integers(1, 255))}"
        if ip not in used:
            used.add(ip)
            return ip, h


def _draw_scanners(spec: ScenarioSpec, day: int, rng: np.random.Generator) -> list[Scanner]:
    used: set[str] = set()
    out = []
    other_ports = {a: BEHAVIOUR[a].port_values for a in Archetype}
    for arch, (base, extra) in spec.counts(day).items():
        beh = BEHAVIOUR[arch]
        for k in range(base + extra):
            injected = k >= base
            ip, _ = _source_ip(rng, beh, used)
            weights = np.array([v.weight for v in beh.variants])
            var = beh.variants[int(rng.choice(len(weights), p=weights / weights.sum()))]
            if var.ports:
                ports = list(var.ports)
            else:
                n_ports = int(rng.integers(SPRAY_COUNT[0], SPRAY_COUNT[1] + 1))
                ports = sorted({int(p) for p in rng.integers(SPRAY_PORTS[0], SPRAY_PORTS[1] + 1, n_ports)})
            if rng.random() < spec.contamination:
                donors = [a for a in Archetype if a != arch and other_ports[a]]
                donor = donors[int(rng.integers(len(donors)))]
                ports.append(int(rng.choice(other_ports[donor])))
            ports = tuple(sorted(set(ports)))
            mu = beh.log_packets + (spec.outbreak_shift if injected else 0.0)
            n = int(np.ceil(rng.lognormal(mu, LOG_SIGMA)))
            n = max(n, len(ports))
            censys = None
            if rng.random() < beh.censys_coverage:
                censys = CensysRecord(ip, frozenset(var.censys_ports), frozenset(var.censys_tags))
            out.append(Scanner(ip, arch, injected, ports, n, censys))
    return out


def _packets_for(sc: Scanner, day_start: float, rng: np.random.Generator) -> list[PacketRecord]:
    beh = BEHAVIOUR[sc.archetype]
    n = sc.n_packets
    gaps = rng.exponential(beh.gap, n)
    # occasional long pauses split activity into several events
    gaps[rng.random(n) < 0.002] += 900.0
    offsets = np.cumsum(gaps) - gaps[0]
    span = float(offsets[-1])
    start = rng.uniform(0, max(DAY_SECONDS - span - 1, 1.0))
    times = day_start + np.minimum(start + offsets, DAY_SECONDS - 1e-3)
    # every port is hit at least once, the rest uniformly
    port_idx = np.concatenate([np.arange(len(sc.ports)), rng.integers(0, len(sc.ports), n - len(sc.ports))])
    rng.shuffle(port_idx)
    dsts = DARKNET + rng.integers(0, DARKNET_SIZE, n)
    sizes = rng.integers(beh.sizes[0], beh.sizes[1] + 1, n)
    ip_ids = rng.integers(0, 0x10000, n)
    seqs = rng.integers(0, 2**32, n, dtype=np.int64)
    src_ports = rng.integers(1024, 65536, n)
    out = []
    for i in range(n):
        dst = int(dsts[i])
        port = sc.ports[port_idx[i]]
        if beh.protocol == Protocol.TCP:
            seq = dst if sc.archetype == Archetype.MIRAI_TELNET else int(seqs[i])
            out.append(PacketRecord(round(float(times[i]), 6), sc.ip, int_to_ip(dst), Protocol.TCP,
                                    int(src_ports[i]), port, int(sizes[i]), int(ip_ids[i]), SYN, seq))
        else:
            out.append(PacketRecord(round(float(times[i]), 6), sc.ip, int_to_ip(dst), Protocol.UDP,
                                    int(src_ports[i]), port, int(sizes[i]), int(ip_ids[i])))
    return out


def generate_day(spec: ScenarioSpec, day: int) -> tuple[list[Scanner], list[PacketRecord]]:
    seq = np.random.SeedSequence([spec.seed, day])
    rng = np.random.default_rng(seq)
    scanners = _draw_scanners(spec, day, rng)
    day_start = dt.datetime.combine(spec.day_date(day), dt.time(), dt.timezone.utc).timestamp()
    packets: list[PacketRecord] = []
    for sc in scanners:
        packets.extend(_packets_for(sc, day_start, rng))
    packets.sort(key=lambda p: (p.timestamp, ip_to_int(p.src_ip), ip_to_int(p.dst_ip)))
    return scanners, packets


def _sanity(scanners: Sequence[Scanner]) -> dict:
    """Mean within- and between-archetype distance on a simple scanner encoding."""
    ports = sorted({p for s in scanners for p in s.ports if p < SPRAY_PORTS[0]})
    pidx = {p: i for i, p in enumerate(ports)}
    V = np.zeros((len(scanners), len(ports) + 2))
    for r, s in enumerate(scanners):
        for p in s.ports:
            V[r, pidx[p] if p in pidx else -2] = 1.0
        V[r, -1] = np.log(s.n_packets) / 5.0
    labels = np.array([s.archetype.value for s in scanners])
    D = np.sqrt(((V[:, None, :] - V[None, :, :]) ** 2).sum(-1))
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(scanners), dtype=bool)
    within = float(D[same & off].mean()) if np.any(same & off) else 0.0
    between = float(D[~same].mean()) if np.any(~same) else 0.0
    return {"within": within, "between": between}


def generate(spec: ScenarioSpec, out_dir: str | Path) -> ScenarioFiles:
    """Write packets, ground truth and annotation snapshots under ``out_dir``."""
    root = Path(out_dir)
    (root / "packets").mkdir(parents=True, exist_ok=True)
    truth_path = root / "truth.csv"
    censys: dict[str, CensysRecord] = {}
    packet_paths = []
    summary: dict = {"spec": spec.to_dict(), "days": []}
    with open(truth_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "src_ip", "archetype", "injected"])
        for day in range(1, spec.days + 1):
            scanners, packets = generate_day(spec, day)
            path = root / "packets" / f"{spec.day_date(day).isoformat()}.jsonl.gz"
            write_jsonl(path, (p.to_dict() for p in packets))
            packet_paths.append(path)
            date = spec.day_date(day).isoformat()
            for sc in sorted(scanners, key=lambda s: ip_to_int(s.ip)):
                w.writerow([date, sc.ip, sc.archetype.value, int(sc.injected)])
                if sc.censys is not None:
                    censys[sc.ip] = sc.censys
            counts = {a.value: sum(s.archetype == a for s in scanners) for a in Archetype}
            summary["days"].append({"day": date, "scanners": counts, "packets": len(packets),
                                    "distance": _sanity(scanners[:400])})

    censys_path = root / f"censys-{spec.start.isoformat()}.jsonl"
    write_jsonl(censys_path, (censys[ip].to_dict() for ip in sorted(censys, key=ip_to_int)))
    geo_rows, asn_rows = [], []
    for arch in Archetype:
        beh = BEHAVIOUR[arch]
        for home, cc, asn in zip(beh.home, beh.countries, beh.asns):
            geo_rows.append((f"{home}.0.0/16", cc))
            asn_rows.append((f"{home}.0.0/16", asn))
    geo_path, asn_path = root / "geo.csv", root / "asn.csv"
    write_prefix_csv(geo_path, geo_rows)
    write_prefix_csv(asn_path, asn_rows)
    spec.save(root / "spec.json")
    summary_path = root / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=1) + "\n")
    return ScenarioFiles(root, packet_paths, truth_path, censys_path, geo_path, asn_path, summary_path)


def read_truth(path: str | Path) -> dict[tuple[str, str], str]:
    """(day, src_ip) -> archetype name."""
    with open(path, newline="", encoding="utf-8") as fh:
        return {(r["day"], r["src_ip"]): r["archetype"] for r in csv.DictReader(fh)}


def mirai_outbreak_spec(seed: int = 0, days: int = 30, day: int = 15, multiplier: float = 10) -> ScenarioSpec:
    return ScenarioSpec(days=days, seed=seed,
                        injections=[Injection(day, Archetype.MIRAI_TELNET, multiplier)])


def ssh_surge_spec(seed: int = 0, days: int = 3, day: int = 2, multiplier: float = 10) -> ScenarioSpec:
    return ScenarioSpec(days=days, seed=seed,
                        injections=[Injection(day, Archetype.CWMP_SSH, multiplier)])

