import io
import random

import pytest
from hypothesis import given, settings, strategies as st

from bcids.traffic import (
    ClassId,
    ConflictingRules,
    ConnectionRecord,
    CurrentNotInFrame,
    FEATURE_NAMES,
    FLAGS,
    Frame,
    LabelRule,
    LabelRuleSet,
    PacketRecord,
    ParseError,
    Protocol,
    RATE_INDEX,
    COUNT_INDEX,
    SERVICES,
    InvalidRecord,
    assemble_connections,
    build_frames,
    cut_frames,
    extract_features,
    extract_frame,
    format_row,
    label_samples,
    parse_row,
    read_features,
    read_trace,
    write_features,
    write_trace,
)

A, B = "10.0.0.1", "10.0.0.2"


def pkt(t, src, dst, sport, dport, length=60, flags=(), proto=Protocol.TCP):
    return PacketRecord(t, src, dst, sport, dport, proto, length, frozenset(flags))


def conn(src, dst, service="eth-p2p", flag="SF", sport=1000, start=0.0, dport=30303,
         proto=Protocol.TCP, duration=0.0, sb=0, db=0):
    return ConnectionRecord((src, dst, sport, dport, proto), start, duration, service, sb, db, flag)


def frame_of(conns):
    conns = sorted(conns, key=ConnectionRecord.sort_key)
    return Frame(0, 0.0, 2.0, tuple(conns))


def brute_force(frame, c):
    """Literal set-filtering reading of the 21 window features."""
    F = list(frame.connections)

    def frac(subset, pred):
        return len([x for x in subset if pred(x)]) / len(subset) if subset else 0.0

    same_src = [x for x in F if x.src_ip == c.src_ip]
    same_srv = [x for x in F if x.service == c.service]
    same_dst = [x for x in F if x.dst_ip == c.dst_ip]
    dst_srv = [x for x in same_dst if x.service == c.service]
    return (
        c.duration,
        ["TCP", "UDP", "ICMP"].index(c.protocol.value),
        SERVICES.index(c.service),
        c.src_bytes,
        c.dst_bytes,
        FLAGS.index(c.flag),
        len(same_src),
        len(same_srv),
        frac(same_src, lambda x: x.flag == "S0"),
        frac(same_src, lambda x: x.service == c.service),
        frac(same_src, lambda x: x.service != c.service),
        frac(same_srv, lambda x: x.flag == "S0"),
        frac(same_srv, lambda x: x.src_ip != c.src_ip),
        len(same_dst),
        len(dst_srv),
        frac(same_dst, lambda x: x.service == c.service),
        frac(same_dst, lambda x: x.service != c.service),
        frac(same_dst, lambda x: x.src_port == c.src_port),
        frac(same_dst, lambda x: x.flag == "S0"),
        frac(dst_srv, lambda x: x.src_ip != c.src_ip),
        frac(dst_srv, lambda x: x.flag == "S0"),
    )


# --- records -----------------------------------------------------------------


def test_packet_invariants():
    with pytest.raises(InvalidRecord):
        pkt(-1.0, A, B, 1, 2)
    with pytest.raises(InvalidRecord):
        pkt(0.0, A, B, 1, 2, length=-5)
    with pytest.raises(InvalidRecord):
        pkt(0.0, A, B, 1, 2, flags={"SYN"}, proto=Protocol.UDP)


# --- assemble_connections ---------------------------------------------------


def test_assemble_empty():
    assert assemble_connections([]) == []


def test_assemble_full_handshake():
    packets = [
        pkt(0.0, A, B, 1000, 30303, 74, {"SYN"}),
        pkt(0.01, B, A, 30303, 1000, 74, {"SYN", "ACK"}),
        pkt(0.1, A, B, 1000, 30303, 100, {"ACK"}),
        pkt(0.2, A, B, 1000, 30303, 66, {"FIN", "ACK"}),
    ]
    (c,) = assemble_connections(packets)
    assert c.duration == 0.2
    assert c.flag == "SF"
    assert c.service == "eth-p2p"
    assert c.src_bytes == 74 + 100 + 66
    assert c.dst_bytes == 74
    assert c.five_tuple == (A, B, 1000, 30303, Protocol.TCP)


def test_assemble_syn_without_reply_is_s0():
    (c,) = assemble_connections([pkt(0.0, A, B, 1000, 30303, 74, {"SYN"})])
    assert c.flag == "S0"
    assert c.dst_bytes == 0
    assert c.duration == 0.0


def test_assemble_rejected_and_other():
    rej = [pkt(0.0, A, B, 1000, 22, 74, {"SYN"}), pkt(0.01, B, A, 22, 1000, 54, {"RST", "ACK"})]
    (c,) = assemble_connections(rej)
    assert c.flag == "REJ" and c.service == "ssh" and c.dst_bytes == 54
    (u,) = assemble_connections([pkt(0.0, A, B, 5000, 30303, 120, proto=Protocol.UDP)])
    assert u.flag == "OTH"


def test_idle_timeout_splits_episodes():
    packets = [
        pkt(0.0, A, B, 1000, 8545, 80, proto=Protocol.UDP),
        pkt(0.5, B, A, 8545, 1000, 90, proto=Protocol.UDP),
        pkt(1.6, A, B, 1000, 8545, 80, proto=Protocol.UDP),
    ]
    first, second = assemble_connections(packets)
    assert (first.start_time, first.duration, first.src_bytes, first.dst_bytes) == (0.0, 0.5, 80, 90)
    assert (second.start_time, second.duration) == (1.6, 0.0)


def test_fin_closes_episode():
    packets = [
        pkt(0.0, A, B, 1000, 80, 74, {"SYN"}),
        pkt(0.1, A, B, 1000, 80, 66, {"FIN"}),
        pkt(0.2, A, B, 1000, 80, 74, {"SYN"}),
    ]
    a, b = assemble_connections(packets)
    assert a.flag == "S0" and a.duration == pytest.approx(0.1)
    assert b.start_time == 0.2


def test_assembly_output_sorted_with_tuple_ties():
    packets = [pkt(0.0, B, A, 9, 80, 60, {"SYN"}), pkt(0.0, A, B, 9, 80, 60, {"SYN"})]
    out = assemble_connections(packets)
    assert [c.src_ip for c in out] == [A, B]


# --- framing ------------------------------------------------------------------


def test_cut_frames_window_arithmetic():
    packets = [pkt(t, A, B, 1, 2, proto=Protocol.UDP) for t in (0.1, 1.9, 2.1)]
    frames = list(cut_frames(packets, 2.0))
    assert [(i, [p.timestamp for p in ps]) for i, ps in frames] == [(0, [0.1, 1.9]), (1, [2.1])]


def test_build_frames_windows():
    packets = [pkt(t, A, B, 1, 2, proto=Protocol.UDP) for t in (0.1, 4.5)]
    frames = build_frames(packets)
    assert [f.frame_index for f in frames] == [0, 2]
    assert frames[1].window == (4.0, 6.0)


# --- extract_features -----------------------------------------------------------


def test_singleton_frame():
    for flag in ("SF", "S0"):
        c = conn(A, B, flag=flag)
        v = extract_features(frame_of([c]), c)
        assert v["count"] == 1 and v["srv_count"] == 1
        assert v["same_srv_rate"] == 1.0 and v["diff_srv_rate"] == 0.0
        expected = 1.0 if flag == "S0" else 0.0
        for name in ("serror_rate", "srv_serror_rate", "dst_host_serror_rate",
                     "dst_host_srv_serror_rate"):
            assert v[name] == expected


def test_mixed_source_frame():
    c1 = conn("10.0.0.1", "10.0.0.9", "eth-p2p", "SF", sport=1, start=0.1)
    c2 = conn("10.0.0.1", "10.0.0.9", "eth-p2p", "SF", sport=2, start=0.2)
    c3 = conn("10.0.0.1", "10.0.0.9", "http", "S0", sport=3, start=0.3, dport=80)
    c4 = conn("10.0.0.2", "10.0.0.9", "eth-p2p", "SF", sport=4, start=0.4)
    v = extract_features(frame_of([c1, c2, c3, c4]), c1)
    assert v["count"] == 3
    assert v["serror_rate"] == 1 / 3
    assert v["same_srv_rate"] == 2 / 3
    assert v["diff_srv_rate"] == 1 / 3


def test_dos_frame():
    conns = [conn("10.9.9.9", B, flag="S0", sport=40000 + i, start=0.1 * i) for i in range(10)]
    frame = frame_of(conns)
    for c in conns:
        v = extract_features(frame, c)
        assert v["dst_host_count"] == 10
        assert v["dst_host_serror_rate"] == 1.0
        assert v["dst_host_same_src_port_rate"] == 1 / 10


def test_current_not_in_frame():
    with pytest.raises(CurrentNotInFrame):
        extract_features(frame_of([conn(A, B)]), conn(B, A))


ips = st.sampled_from(["10.0.0.1", "10.0.0.2", "10.0.0.3", "10.0.9.9"])
conn_strategy = st.builds(
    lambda s, d, srv, flag, sport, start, sb, db: conn(s, d, srv, flag, sport, start, sb=sb, db=db),
    ips, ips, st.sampled_from(SERVICES), st.sampled_from(FLAGS),
    st.integers(1000, 1003), st.floats(0, 1.99), st.integers(0, 5000), st.integers(0, 5000),
)


@settings(max_examples=1000, deadline=None)
@given(st.lists(conn_strategy, min_size=1, max_size=12))
def test_rate_bounds(conns):
    frame = frame_of(conns)
    for v in extract_frame(frame):
        for i in RATE_INDEX:
            assert 0.0 <= v.values[i] <= 1.0
        for i in COUNT_INDEX:
            assert isinstance(v.values[i], int) and 0 <= v.values[i] <= len(conns)


@settings(max_examples=300, deadline=None)
@given(st.lists(conn_strategy, min_size=1, max_size=6))
def test_oracle_equivalence(conns):
    frame = frame_of(conns)
    for c in frame.connections:
        assert extract_features(frame, c).values == brute_force(frame, c)


@settings(max_examples=200, deadline=None)
@given(st.lists(conn_strategy, min_size=1, max_size=8), st.randoms())
def test_permutation_invariance(conns, rnd):
    frame = frame_of(conns)
    shuffled = list(frame.connections)
    rnd.shuffle(shuffled)
    other = Frame(0, 0.0, 2.0, tuple(shuffled))
    for c in frame.connections:
        assert extract_features(other, c).values == extract_features(frame, c).values


def test_extract_frame_matches_single():
    rnd = random.Random(3)
    conns = [conn(rnd.choice([A, B, "10.0.0.3"]), rnd.choice([A, B]), rnd.choice(SERVICES),
                  rnd.choice(FLAGS), rnd.randint(1, 4), rnd.random()) for _ in range(30)]
    frame = frame_of(conns)
    for v, c in zip(extract_frame(frame), frame.connections):
        assert v.values == extract_features(frame, c).values


# --- labeling ---------------------------------------------------------------------


def test_label_defaults_to_normal():
    c = conn(A, B)
    v = extract_frame(frame_of([c]))
    assert [x.label for x in label_samples(v, LabelRuleSet())] == [ClassId.NORMAL]


def test_label_dos_rule():
    conns = [conn("10.9.9.9", B, flag="S0", sport=40000 + i) for i in range(10)]
    samples = extract_frame(frame_of(conns))
    rules = LabelRuleSet((LabelRule(ClassId.DOS, src_ip="10.9.9.9", flag="S0"),))
    assert [v.label for v in label_samples(samples, rules)] == [ClassId.DOS] * 10


def test_label_mixed_frame_preserves_order():
    attack = [conn("10.9.9.9", B, "eth-rpc", sport=i, start=0.1 * i, dport=8545) for i in range(2)]
    benign = [conn(A, B, "eth-p2p", sport=10 + i, start=0.05 + 0.1 * i) for i in range(3)]
    samples = extract_frame(frame_of(attack + benign))
    rules = [LabelRule(ClassId.BP, src_ip="10.9.9.9", service="eth-rpc")]
    labeled = label_samples(samples, rules)
    assert sum(v.label != ClassId.NORMAL for v in labeled) == 2
    assert [v.values for v in labeled] == [v.values for v in samples]


def test_first_matching_rule_wins_and_bytes_ranges():
    c = conn(A, B, "eth-rpc", dport=8545, sb=200, db=90)
    samples = extract_frame(frame_of([c]))
    rules = [LabelRule(ClassId.FOT, service="eth-rpc", min_src_bytes=300),
             LabelRule(ClassId.BP, service="eth-rpc", max_src_bytes=250)]
    assert label_samples(samples, rules)[0].label == ClassId.BP


def test_conflicting_rules():
    rules = [LabelRule(ClassId.BP, src_ip=A), LabelRule(ClassId.DOS, src_ip=A)]
    with pytest.raises(ConflictingRules):
        label_samples([], rules)
    with pytest.raises(ConflictingRules):
        LabelRuleSet(tuple(rules))


def test_rules_json_roundtrip():
    rs = LabelRuleSet((LabelRule(ClassId.DOS, src_ip=A, flag="S0"),
                       LabelRule(ClassId.BP, service="eth-rpc", max_src_bytes=10)))
    assert LabelRuleSet.from_json(rs.to_json()) == rs


# --- file formats ---------------------------------------------------------------


def test_trace_roundtrip():
    packets = [pkt(0.1, A, B, 1, 30303, 74, {"SYN", "ACK"}), pkt(0.3, A, B, 1, 30303, 10,
                                                                proto=Protocol.TCP)]
    buf = io.StringIO()
    write_trace(packets, buf)
    buf.seek(0)
    assert read_trace(buf) == packets


def test_trace_parse_error_names_line():
    bad = io.StringIO('{"timestamp": 0.0, "src_ip": "a", "dst_ip": "b", "src_port": 1, '
                      '"dst_port": 2, "protocol": "UDP", "length_bytes": 1, "tcp_flags": []}\n'
                      "{not json\n")
    with pytest.raises(ParseError) as err:
        read_trace(bad)
    assert err.value.line == 2


def test_feature_csv_header_only_for_empty():
    buf = io.StringIO()
    write_features([], buf)
    assert buf.getvalue() == ",".join(FEATURE_NAMES) + ",label\n"


@settings(max_examples=300, deadline=None)
@given(st.lists(conn_strategy, min_size=1, max_size=8),
       st.floats(0, 1e6, allow_nan=False, allow_subnormal=True))
def test_feature_roundtrip_bit_exact(conns, duration):
    conns[0] = ConnectionRecord(conns[0].five_tuple, conns[0].start_time, duration,
                                conns[0].service, conns[0].src_bytes, conns[0].dst_bytes,
                                conns[0].flag)
    vectors = [v.with_label(ClassId(i % 4)) for i, v in enumerate(extract_frame(frame_of(conns)))]
    buf = io.StringIO()
    write_features(vectors, buf)
    buf.seek(0)
    back = read_features(buf)
    assert [(v.values, v.label) for v in back] == [(v.values, v.label) for v in vectors]
    for a, b in zip(back, vectors):
        assert [repr(x) for x in a.values] == [repr(x) for x in b.values]


def test_parse_row_rejects_unknown_category():
    row = format_row(extract_frame(frame_of([conn(A, B)]))[0])
    row[2] = "smtp"
    with pytest.raises(ParseError):
        parse_row(row, 7)
