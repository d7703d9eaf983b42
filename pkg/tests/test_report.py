import csv
import datetime as dt
from collections import Counter

import numpy as np
import pytest

from darkscope.features import ScannerProfile
from darkscope.report import cluster_report, summarize_cluster

PORT_POOL = [22, 23, 80, 445, 2323, 7547]
TAG_POOL = ["telnet", "ssh", "http", "smb"]


def profile(rng, i):
    ports = frozenset(int(p) for p in rng.choice(PORT_POOL, rng.integers(1, 4), replace=False))
    tags = frozenset(str(t) for t in rng.choice(TAG_POOL, rng.integers(0, 3), replace=False))
    return ScannerProfile(f"10.0.{i // 256}.{i % 256}", dt.date(2021, 9, 1), 10, 400, 5.0, len(ports),
                          5.0, 40.0, 3, 3, 1, 1, ports=ports, censys_tags=tags,
                          country=str(rng.choice(["BR", "CN", "US"])), asn=str(rng.choice(["AS1", "AS2"])),
                          mirai=bool(rng.random() < 0.3))


def counting_oracle(members, attr, k):
    c = Counter()
    for p in members:
        value = getattr(p, attr)
        c.update(value if isinstance(value, frozenset) else [value])
    ranked = sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return [(v, n / len(members)) for v, n in ranked]


def test_summary_matches_counting_oracle():
    rng = np.random.default_rng(0)
    profiles = [profile(rng, i) for i in range(200)]
    labels = rng.integers(0, 5, 200)
    rep = cluster_report(labels, profiles)
    for row in rep.rows:
        members = [p for p, l in zip(profiles, labels) if l == row.cluster]
        assert row.size == len(members)
        assert row.top_ports == counting_oracle(members, "ports", 3)
        assert row.top_tags == counting_oracle(members, "censys_tags", 3)
        assert row.top_countries == counting_oracle(members, "country", 3)
        assert row.top_asns == counting_oracle(members, "asn", 3)
        assert row.mirai_coverage == sum(p.mirai for p in members) / len(members)


def test_rows_largest_first_ties_by_label():
    rng = np.random.default_rng(1)
    profiles = [profile(rng, i) for i in range(9)]
    rep = cluster_report([4, 4, 4, 2, 2, 7, 7, 0, 9], profiles)
    assert [r.cluster for r in rep.rows] == [4, 2, 7, 0, 9]
    assert [r.cluster for r in rep.top(2)] == [4, 2]
    assert rep.by_cluster(7).size == 2
    with pytest.raises(KeyError):
        rep.by_cluster(5)


def test_top_port_helpers():
    rng = np.random.default_rng(2)
    s = summarize_cluster(3, [profile(rng, i) for i in range(10)])
    assert s.top_port == s.top_ports[0][0] and s.top_port_fraction == s.top_ports[0][1]
    assert 0 < s.top_port_fraction <= 1


def test_csv_and_render(tmp_path):
    rng = np.random.default_rng(3)
    profiles = [profile(rng, i) for i in range(30)]
    rep = cluster_report(np.arange(30) % 3, profiles)
    rep.to_csv(tmp_path / "r.csv")
    with open(tmp_path / "r.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["cluster"]) for r in rows] == [r.cluster for r in rep.rows]
    first = rep.rows[0]
    port, frac = rows[0]["top_ports"].split(";")[0].split(":")
    assert int(port) == first.top_port and float(frac) == pytest.approx(first.top_port_fraction, abs=1e-4)
    text = rep.render(2)
    assert len(text.splitlines()) == 3 and "mirai" in text.splitlines()[0]


def test_length_mismatch():
    with pytest.raises(ValueError):
        cluster_report([0, 1], [])
