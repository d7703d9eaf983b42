import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from darkscope.enrich import Annotations, CensysRecord, PrefixTable
from darkscope.features import (
    CATEGORICAL_FAMILIES, NUMERIC_COLUMNS, FeatureMatrix, FeatureSchema, ScannerProfile,
    aggregate_daily, build_schema, featurize, interpret_rows, log2_edges, read_matrix_csv,
    read_profiles, thermometer, top_values, vectorize, write_profiles,
)
from darkscope.ingest import ingest

from conftest import syn, udp

DAY0 = dt.datetime(2021, 9, 1, tzinfo=dt.timezone.utc).timestamp()


def toy_profiles():
    dst = "192.0.2.{}"
    packets = []
    for k in range(4):
        packets.append(syn(DAY0 + 10 * k, src="10.0.0.1", dst=dst.format(k), port=23, size=40))
    for k in range(3):
        packets.append(syn(DAY0 + 5 + 10 * k, src="10.0.0.1", dst=dst.format(k), port=2323, size=60))
    for k in range(2):
        packets.append(udp(DAY0 + 100 + k, src="10.0.0.2", dst=dst.format(200 + k), port=53, size=80))
    packets.sort(key=lambda p: p.timestamp)
    ann = Annotations(geo=PrefixTable([("10.0.0.0/24", "BR")]),
                      censys={"10.0.0.1": CensysRecord("10.0.0.1", frozenset({23}), frozenset({"telnet"}))})
    return aggregate_daily(ingest(packets), ann)


def test_aggregation_counts():
    a, b = toy_profiles()
    assert (a.src_ip, b.src_ip) == ("10.0.0.1", "10.0.0.2")
    assert a.total_packets == 7 and a.total_bytes == 4 * 40 + 3 * 60
    assert a.num_ports == 2 and a.num_events == 2
    assert a.total_lifetime == 30.0 + 20.0 and a.avg_lifetime == 25.0
    assert a.avg_packet_size == pytest.approx(340 / 7)
    assert (a.min_unique_dsts, a.max_unique_dsts) == (3, 4)
    assert a.protocols == frozenset({"TCP"}) and b.protocols == frozenset({"UDP"})
    assert a.country == "BR" and a.asn == "AS0"
    assert a.censys_tags == frozenset({"telnet"}) and b.censys_tags == frozenset()
    assert a.grouping.darknet_remote and a.grouping.censys_remote and a.grouping.scanning
    assert b.grouping.udp and b.grouping.darknet_amplification


def test_profiles_split_by_utc_day():
    packets = [syn(DAY0 - 10.0), syn(DAY0 + 10.0, port=22)]
    profiles = aggregate_daily(ingest(packets))
    assert [p.day for p in profiles] == [dt.date(2021, 8, 31), dt.date(2021, 9, 1)]


def test_profile_roundtrip(tmp_path):
    profiles = toy_profiles()
    write_profiles(tmp_path / "p.jsonl", profiles)
    assert read_profiles(tmp_path / "p.jsonl") == profiles


def test_top_values_ties_ascending():
    assert top_values([{3, 1}, {2, 3}, {1}], 2) == [1, 3]
    assert top_values([{"b"}, {"a"}], 5) == ["a", "b"]
    with pytest.raises(ValueError):
        top_values([], 0)


def test_onehot_layout_and_other_bucket():
    profiles = toy_profiles()
    schema = build_schema(profiles, u=1)
    assert schema.top_ports == [23]  # 23, 53 and 2323 all occur once; smallest first
    width = len(NUMERIC_COLUMNS) + sum(len(schema.vocab(f)) + 1 for f in CATEGORICAL_FAMILIES)
    assert schema.total_width == width == len(schema.columns)
    x = vectorize(profiles[0], schema)
    cols = schema.columns
    assert x[cols.index("ports=23")] == 1.0 and x[cols.index("ports=other")] == 1.0
    y = vectorize(profiles[1], schema)
    assert y[cols.index("ports=23")] == 0.0 and y[cols.index("ports=other")] == 1.0


def test_numeric_scaling_in_unit_interval():
    profiles = toy_profiles()
    X = featurize(profiles, build_schema(profiles)).values[:, : len(NUMERIC_COLUMNS)]
    assert X.min() >= 0.0 and X.max() <= 1.0


def test_log2_edges():
    e = log2_edges(1.0, 1024.0, 10)
    assert e == pytest.approx([2.0 ** k for k in range(10)])


@given(st.floats(0, 1e6, allow_nan=False))
def test_thermometer_is_monotone_prefix(v):
    edges = log2_edges(1.0, 1e5, 8)
    bits = thermometer(v, edges)
    k = int(bits.sum())
    assert np.array_equal(bits, np.r_[np.ones(k), np.zeros(len(edges) - k)])
    assert k == sum(v >= e for e in edges)


def test_thermometer_negative_all_zero():
    assert thermometer(-1.0, [1.0, 2.0]).sum() == 0


def test_thermo_mode_is_binary():
    profiles = toy_profiles()
    schema = build_schema(profiles, mode="thermo", bins=4)
    X = featurize(profiles, schema).values
    assert set(np.unique(X)) <= {0.0, 1.0}
    assert schema.total_width == X.shape[1]


def test_schema_roundtrip_and_fingerprint(tmp_path):
    schema = build_schema(toy_profiles(), u=5, mode="thermo", bins=3)
    schema.save(tmp_path / "s.json")
    back = FeatureSchema.load(tmp_path / "s.json")
    assert back == schema and back.fingerprint() == schema.fingerprint()
    assert build_schema(toy_profiles(), u=4).fingerprint() != schema.fingerprint()


def test_schema_errors():
    with pytest.raises(ValueError):
        build_schema([])
    with pytest.raises(ValueError):
        build_schema(toy_profiles(), mode="binary")


def test_matrix_csv_roundtrip(tmp_path):
    profiles = toy_profiles()
    fm = featurize(profiles, build_schema(profiles))
    fm.to_csv(tmp_path / "f.csv")
    back = FeatureMatrix.from_csv(tmp_path / "f.csv")
    assert back.row_ids == fm.row_ids and back.columns == fm.columns
    assert np.array_equal(back.values, fm.values)


def test_interpret_rows():
    profiles = toy_profiles()
    X, cols, is_tag = interpret_rows(profiles)
    assert X.shape == (2, len(cols)) and sum(is_tag) == 20
    assert X[0, cols.index("total_packets")] == 7
    assert X[1, cols.index("udp")] == 1.0


def test_unseen_values_encode_into_other():
    profiles = toy_profiles()
    schema = build_schema(profiles[:1], u=10)
    x = vectorize(profiles[1], schema)
    assert x[schema.columns.index("ports=other")] == 1.0
    assert x[schema.columns.index("protocols=other")] == 1.0
    assert not math.isnan(x.sum())
