"""Per-cluster summary tables."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Sequence

from .features import ScannerProfile


@dataclass
class ClusterSummary:
    cluster: int
    size: int
    top_ports: list[tuple[int, float]]
    top_tags: list[tuple[str, float]]
    mirai_coverage: float
    top_countries: list[tuple[str, float]]
    top_asns: list[tuple[str, float]]

    @property
    def top_port(self) -> int | None:
        return self.top_ports[0][0] if self.top_ports else None

    @property
    def top_port_fraction(self) -> float:
        return self.top_ports[0][1] if self.top_ports else 0.0


def _top(counter: Counter, size: int, k: int) -> list[tuple[Hashable, float]]:
    # most common first, smaller value first on ties
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(v, n / size) for v, n in ranked[:k]]


def _membership(groups: Iterable[Iterable[Hashable]]) -> Counter:
    c: Counter = Counter()
    for g in groups:
        c.update(set(g))
    return c


def summarize_cluster(cluster: int, members: Sequence[ScannerProfile], k: int = 3) -> ClusterSummary:
    size = len(members)
    return ClusterSummary(
        cluster=int(cluster),
        size=size,
        top_ports=_top(_membership(p.ports for p in members), size, k),
        top_tags=_top(_membership(p.censys_tags for p in members), size, k),
        mirai_coverage=sum(p.mirai for p in members) / size,
        top_countries=_top(Counter(p.country for p in members), size, k),
        top_asns=_top(Counter(p.asn for p in members), size, k),
    )


@dataclass
class ClusterReport:
    rows: list[ClusterSummary]

    def __len__(self) -> int:
        return len(self.rows)

    def top(self, n: int) -> list[ClusterSummary]:
        return self.rows[:n]

    def by_cluster(self, cluster: int) -> ClusterSummary:
        for r in self.rows:
            if r.cluster == cluster:
                return r
        raise KeyError(cluster)

    def to_csv(self, path: str | Path) -> None:
        def pairs(items):
            return ";".join(f"{v}:{f:.4f}" for v, f in items)

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cluster", "size", "top_ports", "top_port_fraction", "top_tags",
                        "mirai_coverage", "top_countries", "top_asns"])
            for r in self.rows:
                w.writerow([r.cluster, r.size, pairs(r.top_ports), f"{r.top_port_fraction:.4f}",
                            pairs(r.top_tags), f"{r.mirai_coverage:.4f}",
                            pairs(r.top_countries), pairs(r.top_asns)])

    def render(self, n: int | None = None) -> str:
        lines = [f"{'cluster':>7} {'size':>6} {'top port':>9} {'frac':>5} {'mirai':>5}  top tags"]
        for r in self.rows[:n]:
            tags = ", ".join(t for t, _ in r.top_tags) or "-"
            port = "-" if r.top_port is None else str(r.top_port)
            lines.append(f"{r.cluster:>7} {r.size:>6} {port:>9} {r.top_port_fraction:>5.2f} "
                         f"{r.mirai_coverage:>5.2f}  {tags}")
        return "\n".join(lines) + "\n"


def cluster_report(labels: Sequence[int], profiles: Sequence[ScannerProfile], k: int = 3) -> ClusterReport:
    """Summaries of every cluster, largest first (lower label on equal size)."""
    if len(labels) != len(profiles):
        raise ValueError("labels and profiles differ in length")
    groups: dict[int, list[ScannerProfile]] = {}
    for lab, prof in zip(labels, profiles):
        groups.setdefault(int(lab), []).append(prof)
    rows = [summarize_cluster(c, m, k) for c, m in groups.items()]
    rows.sort(key=lambda r: (-r.size, r.cluster))
    return ClusterReport(rows)
