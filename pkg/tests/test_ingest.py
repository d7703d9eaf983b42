from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, strategies as st

from darkscope.ingest import (
    ACK, RST, SYN, ZMAP_IP_ID, DarknetEvent, EventCache, EventKey, PacketRecord, Protocol,
    TrafficClass, classify_packet, event_sort_key, format_flags, ingest, ingest_sharded,
    int_to_ip, ip_to_int, masscan_fingerprint, mirai_fingerprint, parse_flags, read_events,
    read_packets, write_jsonl, zmap_fingerprint,
)

from conftest import syn, udp


def replay_oracle(packets, timeout):
    """Group by key, walk each group in time order and cut wherever the gap exceeds timeout."""
    groups = defaultdict(list)
    for p in packets:
        groups[EventKey.of(p)].append(p)
    events = []
    for key, pkts in groups.items():
        pkts.sort(key=lambda p: p.timestamp)
        run = [pkts[0]]
        for p in pkts[1:]:
            if p.timestamp - run[-1].timestamp > timeout:
                events.append(_summarise(key, run))
                run = []
            run.append(p)
        events.append(_summarise(key, run))
    return sorted(events, key=event_sort_key)


def _summarise(key, run):
    dsts = {ip_to_int(p.dst_ip) for p in run}
    return DarknetEvent(
        key=key, first_seen=run[0].timestamp, last_seen=run[-1].timestamp,
        packets=len(run), bytes=sum(p.packet_bytes for p in run), protocol=run[0].protocol,
        unique_dsts=len(dsts), unique_dst24=len({d >> 8 for d in dsts}),
        mirai_packets=sum(mirai_fingerprint(p) for p in run),
        zmap_packets=sum(zmap_fingerprint(p) for p in run),
        masscan_packets=sum(masscan_fingerprint(p) for p in run),
    )


def random_stream(rng, n, n_src=6, horizon=20000.0):
    ts = np.sort(rng.uniform(0, horizon, n))
    out = []
    for t in ts:
        src = f"10.0.{int(rng.integers(2))}.{int(rng.integers(n_src))}"
        dst = int_to_ip(ip_to_int("198.51.100.0") + int(rng.integers(600)))
        kind = rng.random()
        if kind < 0.6:
            out.append(syn(float(t), src, dst, port=int(rng.choice([22, 23, 445])),
                           seq=ip_to_int(dst) if rng.random() < 0.3 else int(rng.integers(2**32)),
                           ip_id=ZMAP_IP_ID if rng.random() < 0.1 else int(rng.integers(2**16))))
        elif kind < 0.9:
            out.append(udp(float(t), src, dst, port=int(rng.choice([53, 123]))))
        else:
            out.append(PacketRecord(float(t), src, dst, Protocol.ICMP, packet_bytes=84, icmp_type=8))
    return out


def test_two_packets_within_timeout_form_one_event():
    evs = list(ingest([syn(0.0), syn(599.0)]))
    assert len(evs) == 1
    assert evs[0].packets == 2 and evs[0].lifetime == 599.0


def test_gap_over_timeout_splits_event():
    evs = sorted(ingest([syn(0.0), syn(601.0)]), key=lambda e: e.first_seen)
    assert [e.packets for e in evs] == [1, 1]
    assert [e.first_seen for e in evs] == [0.0, 601.0]


def test_gap_equal_to_timeout_keeps_event():
    assert len(list(ingest([syn(0.0), syn(600.0)]))) == 1


def test_expiry_measured_from_last_packet():
    # 0, 500, 1000: each gap is 500 although the span is 1000
    assert len(list(ingest([syn(0.0), syn(500.0), syn(1000.0)]))) == 1


def test_different_ports_are_different_events():
    evs = list(ingest([syn(0.0, port=22), syn(1.0, port=23)]))
    assert sorted(e.key.dst_port for e in evs) == [22, 23]


@pytest.mark.parametrize("n,seed", [(300, 0), (3000, 1), (10000, 2)])
def test_matches_replay_oracle(n, seed):
    packets = random_stream(np.random.default_rng(seed), n)
    got = sorted(ingest(packets), key=event_sort_key)
    assert [e.to_dict() for e in got] == [e.to_dict() for e in replay_oracle(packets, 600.0)]


@given(st.lists(st.floats(0, 5000, allow_nan=False), min_size=1, max_size=60),
       st.sampled_from([30.0, 600.0]))
def test_single_key_oracle_property(times, timeout):
    packets = [syn(t) for t in sorted(times)]
    got = sorted(ingest(packets, timeout), key=event_sort_key)
    want = replay_oracle(packets, timeout)
    assert [e.to_dict() for e in got] == [e.to_dict() for e in want]
    assert sum(e.packets for e in got) == len(packets)


def test_sharded_equals_sequential():
    packets = random_stream(np.random.default_rng(3), 2000)
    seq = sorted(ingest(packets), key=event_sort_key)
    par = ingest_sharded(packets, lanes=4)
    assert [e.to_dict() for e in seq] == [e.to_dict() for e in par]


def test_out_of_order_within_slack_is_clamped():
    stats = {}
    evs = list(ingest([syn(100.0), syn(97.0)], slack=5.0, stats=stats))
    assert stats == {"accepted": 2, "rejected": 0}
    assert evs[0].first_seen == 100.0 and evs[0].last_seen == 100.0


def test_out_of_order_beyond_slack_is_rejected():
    stats = {}
    evs = list(ingest([syn(100.0), syn(90.0, port=80)], slack=5.0, stats=stats))
    assert stats["rejected"] == 1
    assert len(evs) == 1


def test_sweep_closes_idle_events_before_flush():
    cache = EventCache(timeout=600.0)
    assert cache.push(syn(0.0, src="10.0.0.1")) == []
    out = cache.push(syn(700.0, src="10.0.0.2"))
    assert [e.key.src_ip for e in out] == ["10.0.0.1"]
    assert [e.key.src_ip for e in cache.flush()] == ["10.0.0.2"]


def test_classification():
    assert classify_packet(syn(0.0)) is TrafficClass.SCANNING
    sa = PacketRecord(0.0, "1.1.1.1", "2.2.2.2", Protocol.TCP, 1, 2, 40, 0, SYN | ACK, 0)
    assert classify_packet(sa) is TrafficClass.BACKSCATTER
    rst = PacketRecord(0.0, "1.1.1.1", "2.2.2.2", Protocol.TCP, 1, 2, 40, 0, RST, 0)
    assert classify_packet(rst) is TrafficClass.BACKSCATTER
    assert classify_packet(udp(0.0)) is TrafficClass.UDP
    echo = PacketRecord(0.0, "1.1.1.1", "2.2.2.2", Protocol.ICMP, packet_bytes=84, icmp_type=8)
    unreach = PacketRecord(0.0, "1.1.1.1", "2.2.2.2", Protocol.ICMP, packet_bytes=84, icmp_type=3)
    assert classify_packet(echo) is TrafficClass.SCANNING
    assert classify_packet(unreach) is TrafficClass.BACKSCATTER


def test_fingerprints():
    dst = "203.0.113.7"
    assert mirai_fingerprint(syn(0.0, dst=dst, seq=ip_to_int(dst)))
    assert not mirai_fingerprint(syn(0.0, dst=dst))
    assert not mirai_fingerprint(udp(0.0))
    assert zmap_fingerprint(syn(0.0, ip_id=ZMAP_IP_ID))
    seq = 123456
    ip_id = (ip_to_int(dst) ^ 23 ^ seq) & 0xFFFF
    assert masscan_fingerprint(syn(0.0, dst=dst, port=23, seq=seq, ip_id=ip_id))


def test_flags_roundtrip():
    assert parse_flags("SYN-ACK") == SYN | ACK
    assert parse_flags(format_flags(SYN | ACK)) == SYN | ACK


def test_record_validation():
    with pytest.raises(ValueError):
        PacketRecord(0.0, "1.1.1.1", "2.2.2.2", Protocol.UDP, packet_bytes=10)
    with pytest.raises(ValueError):
        PacketRecord(0.0, "1.1.1.1", "2.2.2.2", Protocol.TCP, packet_bytes=40)
    with pytest.raises(ValueError):
        PacketRecord.from_dict({"timestamp": 0, "src_ip": "1.1.1.999", "dst_ip": "2.2.2.2",
                                "protocol": "udp", "packet_bytes": 40})


def test_jsonl_roundtrip(tmp_path):
    packets = random_stream(np.random.default_rng(5), 200)
    write_jsonl(tmp_path / "p.jsonl.gz", (p.to_dict() for p in packets))
    assert list(read_packets(tmp_path / "p.jsonl.gz")) == packets
    evs = sorted(ingest(packets), key=event_sort_key)
    write_jsonl(tmp_path / "e.jsonl", (e.to_dict() for e in evs))
    assert [e.to_dict() for e in read_events(tmp_path / "e.jsonl")] == [e.to_dict() for e in evs]
