"""Traffic records, connection assembly and windowed feature extraction.

Packets are grouped into connections keyed by their five-tuple, connections are
grouped into tumbling frames, and every connection in a frame becomes one
21-feature sample whose statistical features are computed over that frame only.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np


class TrafficError(Exception):
    """Base class for traffic-model errors."""


class InvalidRecord(TrafficError, ValueError):
    pass


class ParseError(TrafficError, ValueError):
    """A trace or feature file could not be parsed; ``line`` is 1-based."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


class CurrentNotInFrame(TrafficError, LookupError):
    pass


class ConflictingRules(TrafficError, ValueError):
    pass


class Protocol(str, Enum):
    TCP = "TCP"
    UDP = "UDP"
    ICMP = "ICMP"


class ClassId(IntEnum):
    NORMAL = 0
    BP = 1
    DOS = 2
    FOT = 3


N_CLASSES = len(ClassId)
TCP_FLAG_NAMES = ("SYN", "ACK", "FIN", "RST")

PROTOCOLS = ("tcp", "udp", "icmp")
SERVICES = ("eth-p2p", "eth-rpc", "http", "ssh", "other")
FLAGS = ("SF", "S0", "REJ", "OTH")
SERVICE_PORTS = {30303: "eth-p2p", 8545: "eth-rpc", 80: "http", 8080: "http", 22: "ssh"}

FEATURE_NAMES = (
    "duration",
    "protocol_type",
    "service",
    "src_bytes",
    "dst_bytes",
    "flag",
    "count",
    "srv_count",
    "serror_rate",
    "same_srv_rate",
    "diff_srv_rate",
    "srv_serror_rate",
    "srv_diff_host_rate",
    "dst_host_count",
    "dst_host_srv_count",
    "dst_host_same_srv_rate",
    "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate",
    "dst_host_serror_rate",
    "dst_host_srv_diff_host_rate",
    "dst_host_srv_serror_rate",
)
N_FEATURES = len(FEATURE_NAMES)
CSV_HEADER = FEATURE_NAMES + ("label",)

# positions within the 21-feature vector
DISCRETE_INDEX = {"protocol_type": 1, "service": 2, "flag": 5}
VOCABULARIES = {"protocol_type": PROTOCOLS, "service": SERVICES, "flag": FLAGS}
CONTINUOUS_INDEX = tuple(i for i in range(N_FEATURES) if i not in DISCRETE_INDEX.values())
COUNT_INDEX = (6, 7, 13, 14)
RATE_INDEX = (8, 9, 10, 11, 12, 15, 16, 17, 18, 19, 20)
_INTEGER_INDEX = frozenset((1, 2, 3, 4, 5) + COUNT_INDEX)

DEFAULT_FRAME_LENGTH = 2.0
DEFAULT_IDLE_TIMEOUT = 1.0


def service_for_port(port: int) -> str:
    return SERVICE_PORTS.get(port, "other")


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True, slots=True)
class PacketRecord:
    timestamp: float
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: Protocol
    length_bytes: int
    tcp_flags: frozenset = frozenset()

    def __post_init__(self):
        if not isinstance(self.protocol, Protocol):
            object.__setattr__(self, "protocol", Protocol(self.protocol))
        if not isinstance(self.tcp_flags, frozenset):
            object.__setattr__(self, "tcp_flags", frozenset(self.tcp_flags))
        if not (self.timestamp >= 0 and math.isfinite(self.timestamp)):
            raise InvalidRecord(f"timestamp must be finite and >= 0, got {self.timestamp!r}")
        if self.length_bytes < 0:
            raise InvalidRecord(f"length_bytes must be >= 0, got {self.length_bytes!r}")
        for port in (self.src_port, self.dst_port):
            if not 0 <= port <= 0xFFFF:
                raise InvalidRecord(f"port out of range: {port!r}")
        if self.tcp_flags and self.protocol is not Protocol.TCP:
            raise InvalidRecord("tcp_flags must be empty for non-TCP packets")
        unknown = self.tcp_flags - set(TCP_FLAG_NAMES)
        if unknown:
            raise InvalidRecord(f"unknown tcp flags: {sorted(unknown)}")

    def to_json(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "src_ip": self.src_ip,
            "dst_ip": self.dst_ip,
            "src_port": self.src_port,
            "dst_port": self.dst_port,
            "protocol": self.protocol.value,
            "length_bytes": self.length_bytes,
            "tcp_flags": [f for f in TCP_FLAG_NAMES if f in self.tcp_flags],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PacketRecord":
        return cls(
            timestamp=float(obj["timestamp"]),
            src_ip=str(obj["src_ip"]),
            dst_ip=str(obj["dst_ip"]),
            src_port=int(obj["src_port"]),
            dst_port=int(obj["dst_port"]),
            protocol=Protocol(obj["protocol"]),
            length_bytes=int(obj["length_bytes"]),
            tcp_flags=frozenset(obj.get("tcp_flags", ())),
        )


FiveTuple = tuple  # (src_ip, dst_ip, src_port, dst_port, protocol)


@dataclass(frozen=True, slots=True)
class ConnectionRecord:
    five_tuple: FiveTuple
    start_time: float
    duration: float
    service: str
    src_bytes: int
    dst_bytes: int
    flag: str

    @property
    def src_ip(self) -> str:
        return self.five_tuple[0]

    @property
    def dst_ip(self) -> str:
        return self.five_tuple[1]

    @property
    def src_port(self) -> int:
        return self.five_tuple[2]

    @property
    def dst_port(self) -> int:
        return self.five_tuple[3]

    @property
    def protocol(self) -> Protocol:
        return self.five_tuple[4]

    def sort_key(self):
        ft = self.five_tuple
        return (self.start_time, ft[0], ft[1], ft[2], ft[3], Protocol(ft[4]).value)


class _Episode:
    __slots__ = ("key", "first", "last", "src_bytes", "dst_bytes", "syn", "synack", "rst_reply")

    def __init__(self, key, ts):
        self.key = key
        self.first = ts
        self.last = ts
        self.src_bytes = 0
        self.dst_bytes = 0
        self.syn = False
        self.synack = False
        self.rst_reply = False

    def add(self, p: PacketRecord, forward: bool) -> None:
        self.last = p.timestamp
        flags = p.tcp_flags
        if forward:
            self.src_bytes += p.length_bytes
            if "SYN" in flags and "ACK" not in flags:
                self.syn = True
        else:
            self.dst_bytes += p.length_bytes
            if "SYN" in flags and "ACK" in flags:
                self.synack = True
            if "RST" in flags:
                self.rst_reply = True

    def flag(self) -> str:
        if self.key[4] is not Protocol.TCP or not self.syn:
            return "OTH"
        if self.synack:
            return "SF"
        if self.rst_reply:
            return "REJ"
        return "S0"

    def close(self) -> ConnectionRecord:
        return ConnectionRecord(
            five_tuple=self.key,
            start_time=self.first,
            duration=self.last - self.first,
            service=service_for_port(self.key[3]),
            src_bytes=self.src_bytes,
            dst_bytes=self.dst_bytes,
            flag=self.flag(),
        )


def assemble_connections(
    packets: Iterable[PacketRecord], idle_timeout: float = DEFAULT_IDLE_TIMEOUT
) -> list[ConnectionRecord]:
    """Group time-ordered packets into connection episodes.

    The first packet of an episode fixes its direction. An episode ends on a
    TCP FIN or RST (that packet included) or when the next packet on the same
    five-tuple arrives more than ``idle_timeout`` seconds after the previous one.
    Output is sorted by start time, ties by five-tuple.
    """
    active: dict = {}
    done: list[ConnectionRecord] = []
    for p in packets:
        fwd = (p.src_ip, p.dst_ip, p.src_port, p.dst_port, p.protocol)
        ep = active.get(fwd)
        forward = True
        if ep is None:
            rev = (p.dst_ip, p.src_ip, p.dst_port, p.src_port, p.protocol)
            ep = active.get(rev)
            forward = False
        if ep is not None and p.timestamp - ep.last > idle_timeout:
            done.append(active.pop(ep.key).close())
            ep = None
        if ep is None:
            ep = _Episode(fwd, p.timestamp)
            active[fwd] = ep
            forward = True
        ep.add(p, forward)
        if p.protocol is Protocol.TCP and ("FIN" in p.tcp_flags or "RST" in p.tcp_flags):
            done.append(active.pop(ep.key).close())
    done.extend(ep.close() for ep in active.values())
    done.sort(key=ConnectionRecord.sort_key)
    return done


# ---------------------------------------------------------------------------
# frames


@dataclass(frozen=True)
class Frame:
    frame_index: int
    start: float
    length: float
    connections: tuple[ConnectionRecord, ...]

    @property
    def window(self) -> tuple[float, float]:
        return (self.start, self.start + self.length)


def frame_index_of(timestamp: float, frame_length: float = DEFAULT_FRAME_LENGTH,
                   origin: float = 0.0) -> int:
    return int(math.floor((timestamp - origin) / frame_length))


def cut_frames(
    packets: Iterable[PacketRecord],
    frame_length: float = DEFAULT_FRAME_LENGTH,
    origin: float = 0.0,
) -> Iterator[tuple[int, list[PacketRecord]]]:
    """Partition a time-ordered packet stream into tumbling windows.

    Yields ``(frame_index, packets)`` for every non-empty window in order.
    """
    current: int | None = None
    bucket: list[PacketRecord] = []
    for p in packets:
        idx = frame_index_of(p.timestamp, frame_length, origin)
        if current is not None and idx != current:
            yield current, bucket
            bucket = []
        current = idx
        bucket.append(p)
    if current is not None:
        yield current, bucket


def make_frame(frame_index: int, packets: Sequence[PacketRecord],
               frame_length: float = DEFAULT_FRAME_LENGTH,
               idle_timeout: float = DEFAULT_IDLE_TIMEOUT, origin: float = 0.0) -> Frame:
    conns = assemble_connections(packets, idle_timeout)
    return Frame(frame_index, origin + frame_index * frame_length, frame_length, tuple(conns))


def build_frames(
    packets: Iterable[PacketRecord],
    frame_length: float = DEFAULT_FRAME_LENGTH,
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
    origin: float = 0.0,
) -> list[Frame]:
    """Cut a trace into frames and assemble each frame's packets into connections."""
    return [
        make_frame(idx, bucket, frame_length, idle_timeout, origin)
        for idx, bucket in cut_frames(packets, frame_length, origin)
    ]


# ---------------------------------------------------------------------------
# features


@dataclass(frozen=True)
class FeatureVector:
    """One sample: the 21 window features in fixed order plus a class label.

    ``values`` holds the discrete features (protocol_type, service, flag) as
    integer category codes. ``source`` keeps the originating connection for
    rule-based labeling; it never leaves the node and is not serialized.
    """

    values: tuple
    label: ClassId = ClassId.NORMAL
    source: ConnectionRecord | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if len(self.values) != N_FEATURES:
            raise ValueError(f"expected {N_FEATURES} features, got {len(self.values)}")
        if not isinstance(self.label, ClassId):
            object.__setattr__(self, "label", ClassId(self.label))

    def __getitem__(self, name: str):
        return self.values[FEATURE_NAMES.index(name)]

    def category(self, name: str) -> str:
        return VOCABULARIES[name][self.values[DISCRETE_INDEX[name]]]

    def with_label(self, label: ClassId) -> "FeatureVector":
        return FeatureVector(self.values, ClassId(label), self.source)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


_PROTO_CODE = {Protocol.TCP: 0, Protocol.UDP: 1, Protocol.ICMP: 2}
_SERVICE_CODE = {s: i for i, s in enumerate(SERVICES)}
_FLAG_CODE = {f: i for i, f in enumerate(FLAGS)}
_S0 = _FLAG_CODE["S0"]


def _codes(conns: Sequence[ConnectionRecord]):
    ip_ids: dict[str, int] = {}
    src = np.fromiter((ip_ids.setdefault(c.src_ip, len(ip_ids)) for c in conns), np.int64, len(conns))
    dst = np.fromiter((ip_ids.setdefault(c.dst_ip, len(ip_ids)) for c in conns), np.int64, len(conns))
    srv = np.fromiter((_SERVICE_CODE[c.service] for c in conns), np.int64, len(conns))
    flag = np.fromiter((_FLAG_CODE[c.flag] for c in conns), np.int64, len(conns))
    sport = np.fromiter((c.src_port for c in conns), np.int64, len(conns))
    return src, dst, srv, flag, sport


def _ratio(num: np.ndarray, den: np.ndarray) -> list[float]:
    return [float(n) / float(d) if d else 0.0 for n, d in zip(num.tolist(), den.tolist())]


def _window_features(conns: Sequence[ConnectionRecord], rows: Sequence[int]) -> list[tuple]:
    src, dst, srv, flag, sport = _codes(conns)
    rows = np.asarray(rows, dtype=np.int64)
    s0 = flag == _S0

    same_src = src[rows, None] == src[None, :]
    same_dst = dst[rows, None] == dst[None, :]
    same_srv = srv[rows, None] == srv[None, :]
    same_sport = sport[rows, None] == sport[None, :]

    count = same_src.sum(1)
    srv_count = same_srv.sum(1)
    serror = (same_src & s0).sum(1)
    src_same_srv = (same_src & same_srv).sum(1)
    src_diff_srv = (same_src & ~same_srv).sum(1)
    srv_serror = (same_srv & s0).sum(1)
    srv_diff_host = (same_srv & ~same_src).sum(1)

    dh_count = same_dst.sum(1)
    dh_srv = same_dst & same_srv
    dh_srv_count = dh_srv.sum(1)
    dh_diff_srv = (same_dst & ~same_srv).sum(1)
    dh_same_sport = (same_dst & same_sport).sum(1)
    dh_serror = (same_dst & s0).sum(1)
    dh_srv_diff_host = (dh_srv & ~same_src).sum(1)
    dh_srv_serror = (dh_srv & s0).sum(1)

    cols = [
        count.tolist(),
        srv_count.tolist(),
        _ratio(serror, count),
        _ratio(src_same_srv, count),
        _ratio(src_diff_srv, count),
        _ratio(srv_serror, srv_count),
        _ratio(srv_diff_host, srv_count),
        dh_count.tolist(),
        dh_srv_count.tolist(),
        _ratio(dh_srv_count, dh_count),
        _ratio(dh_diff_srv, dh_count),
        _ratio(dh_same_sport, dh_count),
        _ratio(dh_serror, dh_count),
        _ratio(dh_srv_diff_host, dh_srv_count),
        _ratio(dh_srv_serror, dh_srv_count),
    ]
    out = []
    for j, i in enumerate(rows.tolist()):
        c = conns[i]
        basic = (
            float(c.duration),
            _PROTO_CODE[Protocol(c.protocol)],
            _SERVICE_CODE[c.service],
            int(c.src_bytes),
            int(c.dst_bytes),
            _FLAG_CODE[c.flag],
        )
        out.append(basic + tuple(col[j] for col in cols))
    return out


def extract_features(frame: Frame, current: ConnectionRecord) -> FeatureVector:
    """Compute the 21 features of ``current`` over the connections of ``frame``."""
    try:
        i = frame.connections.index(current)
    except ValueError:
        raise CurrentNotInFrame(f"{current.five_tuple} @ {current.start_time} not in frame "
                                f"{frame.frame_index}") from None
    (values,) = _window_features(frame.connections, [i])
    return FeatureVector(values, ClassId.NORMAL, current)


def extract_frame(frame: Frame) -> list[FeatureVector]:
    """Feature vectors for every connection of a frame, in frame order."""
    if not frame.connections:
        return []
    rows = range(len(frame.connections))
    return [
        FeatureVector(v, ClassId.NORMAL, c)
        for v, c in zip(_window_features(frame.connections, rows), frame.connections)
    ]


def extract_trace(packets: Iterable[PacketRecord],
                  frame_length: float = DEFAULT_FRAME_LENGTH,
                  idle_timeout: float = DEFAULT_IDLE_TIMEOUT) -> list[FeatureVector]:
    out: list[FeatureVector] = []
    for frame in build_frames(packets, frame_length, idle_timeout):
        out.extend(extract_frame(frame))
    return out


# ---------------------------------------------------------------------------
# labeling


@dataclass(frozen=True)
class LabelRule:
    """Assigns ``label`` to samples matching every predicate that is set.

    IP predicates look at the sample's source connection; the byte ranges are
    inclusive and apply to src_bytes / dst_bytes.
    """

    label: ClassId
    src_ip: str | None = None
    dst_ip: str | None = None
    service: str | None = None
    flag: str | None = None
    min_src_bytes: int | None = None
    max_src_bytes: int | None = None
    min_dst_bytes: int | None = None
    max_dst_bytes: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "label", ClassId(self.label))
        if self.service is not None and self.service not in SERVICES:
            raise ValueError(f"unknown service {self.service!r}")
        if self.flag is not None and self.flag not in FLAGS:
            raise ValueError(f"unknown flag {self.flag!r}")

    def predicates(self) -> tuple:
        return (self.src_ip, self.dst_ip, self.service, self.flag, self.min_src_bytes,
                self.max_src_bytes, self.min_dst_bytes, self.max_dst_bytes)

    def matches(self, v: FeatureVector) -> bool:
        if self.src_ip is not None or self.dst_ip is not None:
            if v.source is None:
                return False
            if self.src_ip is not None and v.source.src_ip != self.src_ip:
                return False
            if self.dst_ip is not None and v.source.dst_ip != self.dst_ip:
                return False
        if self.service is not None and v.category("service") != self.service:
            return False
        if self.flag is not None and v.category("flag") != self.flag:
            return False
        sb, db = v.values[3], v.values[4]
        if self.min_src_bytes is not None and sb < self.min_src_bytes:
            return False
        if self.max_src_bytes is not None and sb > self.max_src_bytes:
            return False
        if self.min_dst_bytes is not None and db < self.min_dst_bytes:
            return False
        if self.max_dst_bytes is not None and db > self.max_dst_bytes:
            return False
        return True

    def to_json(self) -> dict:
        d = {"label": int(self.label)}
        for name in ("src_ip", "dst_ip", "service", "flag", "min_src_bytes", "max_src_bytes",
                     "min_dst_bytes", "max_dst_bytes"):
            value = getattr(self, name)
            if value is not None:
                d[name] = value
        return d


@dataclass(frozen=True)
class LabelRuleSet:
    rules: tuple[LabelRule, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        check_rules(self.rules)

    def __iter__(self):
        return iter(self.rules)

    def __len__(self):
        return len(self.rules)

    def to_json(self) -> dict:
        return {"rules": [r.to_json() for r in self.rules]}

    @classmethod
    def from_json(cls, obj: dict) -> "LabelRuleSet":
        return cls(tuple(LabelRule(**r) for r in obj.get("rules", ())))


def check_rules(rules: Iterable[LabelRule]) -> None:
    seen: dict[tuple, ClassId] = {}
    for r in rules:
        key = r.predicates()
        if key in seen and seen[key] != r.label:
            raise ConflictingRules(f"identical predicates map to {seen[key].name} and {r.label.name}")
        seen.setdefault(key, r.label)


def label_samples(vectors: Iterable[FeatureVector],
                  rules: LabelRuleSet | Iterable[LabelRule]) -> list[FeatureVector]:
    """Label each sample with the first matching rule's class, else NORMAL."""
    rules = tuple(rules)
    check_rules(rules)
    out = []
    for v in vectors:
        label = next((r.label for r in rules if r.matches(v)), ClassId.NORMAL)
        out.append(v.with_label(label))
    return out


# ---------------------------------------------------------------------------
# file formats


def _open_text(target, mode: str):
    if isinstance(target, (str, Path)):
        return open(target, mode, newline="" if "w" in mode else None, encoding="utf-8")
    return None


def write_trace(packets: Iterable[PacketRecord], target: str | Path | TextIO) -> None:
    fh = _open_text(target, "w")
    out = fh or target
    try:
        for p in packets:
            out.write(json.dumps(p.to_json(), separators=(",", ":")) + "\n")
    finally:
        if fh:
            fh.close()


def iter_trace(source: str | Path | TextIO) -> Iterator[PacketRecord]:
    fh = _open_text(source, "r")
    src = fh or source
    try:
        for n, line in enumerate(src, 1):
            if not line.strip():
                continue
            try:
                yield PacketRecord.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(n, f"{type(exc).__name__}: {exc}") from exc
    finally:
        if fh:
            fh.close()


def read_trace(source: str | Path | TextIO) -> list[PacketRecord]:
    return list(iter_trace(source))


def _format_value(i: int, value) -> str:
    if i in DISCRETE_INDEX.values():
        name = FEATURE_NAMES[i]
        return VOCABULARIES[name][value]
    if i in _INTEGER_INDEX:
        return str(int(value))
    return repr(float(value))


def format_row(v: FeatureVector) -> list[str]:
    return [_format_value(i, x) for i, x in enumerate(v.values)] + [str(int(v.label))]


def write_features(vectors: Iterable[FeatureVector], target: str | Path | TextIO) -> None:
    """Write the 22-column feature CSV (discrete features as category names)."""
    fh = _open_text(target, "w")
    out = fh or target
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for v in vectors:
            w.writerow(format_row(v))
    finally:
        if fh:
            fh.close()


def parse_row(row: Sequence[str], line: int = 0) -> FeatureVector:
    if len(row) != len(CSV_HEADER):
        raise ParseError(line, f"expected {len(CSV_HEADER)} columns, got {len(row)}")
    values = []
    try:
        for i, cell in enumerate(row[:N_FEATURES]):
            if i in DISCRETE_INDEX.values():
                values.append(VOCABULARIES[FEATURE_NAMES[i]].index(cell))
            elif i in _INTEGER_INDEX:
                values.append(int(cell))
            else:
                values.append(float(cell))
        label = ClassId(int(row[N_FEATURES]))
    except ValueError as exc:
        raise ParseError(line, str(exc)) from exc
    return FeatureVector(tuple(values), label)


def read_features(source: str | Path | TextIO) -> list[FeatureVector]:
    fh = _open_text(source, "r")
    src = fh or source
    try:
        reader = csv.reader(src)
        header = next(reader, None)
        if header is None:
            raise ParseError(1, "missing header")
        if tuple(header) != CSV_HEADER:
            raise ParseError(1, "unexpected header")
        return [parse_row(row, n) for n, row in enumerate(reader, 2)]
    finally:
        if fh:
            fh.close()


def features_to_csv_text(vectors: Iterable[FeatureVector]) -> str:
    buf = io.StringIO()
    write_features(vectors, buf)
    return buf.getvalue()


def to_matrix(vectors: Sequence[FeatureVector]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into a raw ``(n, 21)`` float matrix and an ``(n,)`` label array."""
    X = np.array([v.values for v in vectors], dtype=np.float64).reshape(len(vectors), N_FEATURES)
    y = np.fromiter((int(v.label) for v in vectors), np.int64, len(vectors))
    return X, y
