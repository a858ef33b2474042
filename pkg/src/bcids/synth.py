"""Seeded packet-trace generator for a small Ethereum-like testbed.

Each node's trace is what that node would capture: peer gossip on 30303,
transactions and monitoring calls on the 8545 JSON-RPC port, HTTP polls and
the odd SSH session, plus optional attack traffic from one attacker host.
Arrivals of every traffic source are independent Poisson processes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._seeding import fork, fork_seed
from .traffic import (
    ClassId,
    FeatureVector,
    LabelRule,
    LabelRuleSet,
    PacketRecord,
    Protocol,
    extract_trace,
    label_samples,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class InvalidConfig(ValueError):
    pass


ATTACK_NAMES = {"BP": ClassId.BP, "DOS": ClassId.DOS, "FOT": ClassId.FOT}

# Per-kind default intensities (events/s). Calibrated so that frames under
# FoT carry more than 300 samples while BP/DoS frames stay under 50.
DEFAULT_INTENSITY = {ClassId.BP: 4.0, ClassId.DOS: 10.0, ClassId.FOT: 180.0}

# Per-node sample counts at full scale.
FULL_NODE_COUNTS = {ClassId.NORMAL: 30_000, ClassId.BP: 3_000, ClassId.DOS: 3_000,
                   ClassId.FOT: 3_000}

BOOTNODE_IP = "10.0.0.100"
NETSTATS_IP = "10.0.0.200"
ADMIN_IP = "10.0.3.1"
DEFAULT_ATTACKER_IP = "10.0.9.9"
N_USERS = 16


def node_ip(k: int) -> str:
    return f"10.0.0.{k + 1}"


def server_ip(k: int) -> str:
    return f"10.0.1.{k + 1}"


def user_ip(i: int) -> str:
    return f"10.0.2.{i + 1}"


@dataclass(frozen=True)
class AttackConfig:
    kind: ClassId
    start: float
    intensity: float | None = None
    attacker_ip: str = DEFAULT_ATTACKER_IP
    stop: float | None = None
    targets: tuple[int, ...] | None = None

    def __post_init__(self):
        kind = self.kind
        if isinstance(kind, str):
            key = kind.upper().replace("-", "").replace("_", "")
            if key.isdigit():
                kind = int(key)
            elif key in ATTACK_NAMES:
                kind = ATTACK_NAMES[key]
            else:
                raise InvalidConfig(f"unknown attack kind {self.kind!r}")
        try:
            kind = ClassId(kind)
        except ValueError:
            raise InvalidConfig(f"unknown attack kind {self.kind!r}") from None
        if kind is ClassId.NORMAL:
            raise InvalidConfig("attack kind must be one of BP, DoS, FoT")
        object.__setattr__(self, "kind", kind)
        if self.intensity is None:
            object.__setattr__(self, "intensity", DEFAULT_INTENSITY[kind])
        if not self.intensity > 0:
            raise InvalidConfig("attack intensity must be > 0")
        if self.start < 0:
            raise InvalidConfig("attack start must be >= 0")
        if self.stop is not None and self.stop <= self.start:
            raise InvalidConfig("attack stop must be after start")
        if self.targets is not None:
            object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))


@dataclass(frozen=True)
class ScenarioConfig:
    """One capture session of ``duration`` seconds across ``node_count`` nodes.

    ``benign_tx_rate`` is the rate of transaction submissions from each
    node's trusted server; the other benign sources have their own rates.
    """

    seed: int
    duration: float
    node_count: int = 3
    benign_tx_rate: float = 2.0
    attack: AttackConfig | None = None
    p2p_rate: float = 3.0
    discovery_rate: float = 0.3
    rpc_poll_rate: float = 0.5
    http_rate: float = 0.5
    ssh_rate: float = 0.02
    fot_gossip_factor: float = 0.3

    def __post_init__(self):
        if isinstance(self.attack, Mapping):
            object.__setattr__(self, "attack", AttackConfig(**self.attack))
        if not self.duration > 0:
            raise InvalidConfig("duration must be > 0")
        if not 1 <= self.node_count <= 99:
            raise InvalidConfig("node_count must be in 1..99")
        if not self.benign_tx_rate > 0:
            raise InvalidConfig("benign_tx_rate must be > 0")
        for name in ("p2p_rate", "discovery_rate", "rpc_poll_rate", "http_rate", "ssh_rate",
                     "fot_gossip_factor"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be >= 0")
        if self.attack is not None:
            if not self.attack.start < self.duration:
                raise InvalidConfig("attack.start must be before the end of the scenario")
            if self.attack.targets is not None and any(
                    not 0 <= t < self.node_count for t in self.attack.targets):
                raise InvalidConfig("attack targets must be node indices")

    @property
    def attack_window(self) -> tuple[float, float] | None:
        if self.attack is None:
            return None
        stop = self.duration if self.attack.stop is None else min(self.attack.stop, self.duration)
        return (self.attack.start, stop)

    def attacked(self, node: int) -> bool:
        return self.attack is not None and (self.attack.targets is None
                                            or node in self.attack.targets)

    def to_json(self) -> dict:
        d = asdict(self)
        if self.attack is not None:
            d["attack"]["kind"] = self.attack.kind.name
            if self.attack.targets is not None:
                d["attack"]["targets"] = list(self.attack.targets)
        return d


def scenario_from_mapping(mapping: Mapping) -> ScenarioConfig:
    d = dict(mapping)
    attack = d.pop("attack", None)
    known = set(ScenarioConfig.__dataclass_fields__) - {"attack"}
    unknown = set(d) - known
    if unknown:
        raise InvalidConfig(f"unknown scenario keys: {sorted(unknown)}")
    if "seed" not in d or "duration" not in d:
        raise InvalidConfig("scenario needs 'seed' and 'duration'")
    if attack is not None:
        if not isinstance(attack, Mapping):
            raise InvalidConfig("[attack] must be a table")
        try:
            attack = AttackConfig(**attack)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc
    try:
        return ScenarioConfig(attack=attack, **d)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Read a TOML scenario file (top-level keys plus an optional ``[attack]`` table)."""
    try:
        data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc
    return scenario_from_mapping(data.get("scenario", data))


# ---------------------------------------------------------------------------
# packet emitters


class _Trace:
    """Accumulates packets; ``seq`` keeps ties in emission order after sorting."""

    def __init__(self, rng: np.random.Generator, end: float):
        self.rng = rng
        self.end = end
        self.rows: list[tuple[float, int, PacketRecord]] = []

    def emit(self, t, src, dst, sport, dport, proto, length, flags=()):
        t = round(t, 6)
        if t >= self.end:
            return
        self.rows.append((t, len(self.rows),
                          PacketRecord(t, src, dst, sport, dport, proto, int(length), frozenset(flags))))

    def ephemeral_port(self) -> int:
        return int(self.rng.integers(32768, 61000))

    def tcp_session(self, t, client, server, dport, requests, responses, think=(0.001, 0.02)):
        rng = self.rng
        cport = self.ephemeral_port()
        rtt = float(rng.uniform(0.0005, 0.004))
        self.emit(t, client, server, cport, dport, Protocol.TCP, 74, {"SYN"})
        t += rtt
        self.emit(t, server, client, dport, cport, Protocol.TCP, 74, {"SYN", "ACK"})
        t += rtt
        self.emit(t, client, server, cport, dport, Protocol.TCP, 66, {"ACK"})
        for req, resp in zip(requests, responses):
            t += float(rng.uniform(*think))
            self.emit(t, client, server, cport, dport, Protocol.TCP, 66 + req, {"ACK"})
            if resp:
                t += rtt + float(rng.uniform(0.0002, 0.003))
                self.emit(t, server, client, dport, cport, Protocol.TCP, 66 + resp, {"ACK"})
        t += rtt
        self.emit(t, client, server, cport, dport, Protocol.TCP, 66, {"FIN", "ACK"})

    def syn_only(self, t, client, server, dport):
        self.emit(t, client, server, self.ephemeral_port(), dport, Protocol.TCP, 74, {"SYN"})

    def udp_exchange(self, t, client, server, dport, req, resp):
        cport = self.ephemeral_port()
        self.emit(t, client, server, cport, dport, Protocol.UDP, 42 + req)
        t += float(self.rng.uniform(0.0005, 0.005))
        self.emit(t, server, client, dport, cport, Protocol.UDP, 42 + resp)

    def packets(self) -> list[PacketRecord]:
        self.rows.sort(key=lambda r: (r[0], r[1]))
        return [r[2] for r in self.rows]


def _arrivals(rng: np.random.Generator, rate: float, start: float, stop: float) -> list[float]:
    if rate <= 0 or stop <= start:
        return []
    out = []
    t = start
    while True:
        t += float(rng.exponential(1.0 / rate))
        if t >= stop:
            return out
        out.append(t)


def _ints(rng, lo, hi, n):
    return [int(x) for x in rng.integers(lo, hi, n)]


def _node_trace(cfg: ScenarioConfig, k: int) -> list[PacketRecord]:
    me = node_ip(k)
    peers = [node_ip(j) for j in range(cfg.node_count) if j != k] + [BOOTNODE_IP]
    tr = _Trace(fork(cfg.seed, "synth", f"node{k}", "packets"), cfg.duration)
    rng = tr.rng

    def src(name):
        return fork(cfg.seed, "synth", f"node{k}", name)

    def gossip(t):
        peer = peers[int(rng.integers(len(peers)))]
        n = int(rng.integers(1, 5))
        msgs = _ints(rng, 100, 1400, n)
        acks = _ints(rng, 0, 200, n)
        if rng.random() < 0.5:
            tr.tcp_session(t, peer, me, 30303, msgs, acks, think=(0.005, 0.15))
        else:
            tr.tcp_session(t, me, peer, 30303, msgs, acks, think=(0.005, 0.15))

    for t in _arrivals(src("tx"), cfg.benign_tx_rate, 0.0, cfg.duration):
        tr.tcp_session(t, server_ip(k), me, 8545, _ints(rng, 350, 650, 1), _ints(rng, 100, 140, 1))
    for t in _arrivals(src("p2p"), cfg.p2p_rate, 0.0, cfg.duration):
        gossip(t)
    for t in _arrivals(src("discovery"), cfg.discovery_rate, 0.0, cfg.duration):
        peer = peers[int(rng.integers(len(peers)))]
        tr.udp_exchange(t, peer, me, 30303, int(rng.integers(60, 200)), int(rng.integers(60, 200)))
    for t in _arrivals(src("netstats"), cfg.rpc_poll_rate, 0.0, cfg.duration):
        tr.tcp_session(t, NETSTATS_IP, me, 8545, _ints(rng, 80, 120, 1), _ints(rng, 400, 3000, 1))
    for t in _arrivals(src("http"), cfg.http_rate, 0.0, cfg.duration):
        user = user_ip(int(rng.integers(N_USERS)))
        tr.tcp_session(t, user, me, 80, _ints(rng, 200, 500, 1), _ints(rng, 1000, 8000, 1))
    for t in _arrivals(src("ssh"), cfg.ssh_rate, 0.0, cfg.duration):
        n = int(rng.integers(3, 12))
        tr.tcp_session(t, ADMIN_IP, me, 22, _ints(rng, 40, 200, n), _ints(rng, 40, 600, n),
                       think=(0.05, 0.4))

    if cfg.attacked(k):
        a = cfg.attack
        lo, hi = cfg.attack_window
        arng = src("attack")
        times = _arrivals(arng, a.intensity, lo, hi)
        if a.kind is ClassId.BP:
            for t in times:
                tr.tcp_session(t, a.attacker_ip, me, 8545, _ints(rng, 180, 260, 1),
                               _ints(rng, 70, 100, 1))
        elif a.kind is ClassId.DOS:
            for t in times:
                tr.syn_only(t, a.attacker_ip, me, 30303)
        else:
            for t in times:
                tr.tcp_session(t, a.attacker_ip, me, 8545, _ints(rng, 300, 450, 1),
                               _ints(rng, 100, 130, 1))
            # flooded transactions are re-broadcast to peers as ordinary gossip
            for t in _arrivals(src("fot-gossip"), cfg.fot_gossip_factor * a.intensity, lo, hi):
                gossip(t)
    return tr.packets()


def generate_trace(config: ScenarioConfig) -> list[list[PacketRecord]]:
    """Per-node packet traces, each sorted by timestamp; a pure function of ``config``."""
    if not isinstance(config, ScenarioConfig):
        raise InvalidConfig("generate_trace needs a ScenarioConfig")
    return [_node_trace(config, k) for k in range(config.node_count)]


def generate_node_trace(config: ScenarioConfig, node: int) -> list[PacketRecord]:
    """The trace of a single node; equal to ``generate_trace(config)[node]``."""
    if not 0 <= node < config.node_count:
        raise InvalidConfig(f"node {node} outside 0..{config.node_count - 1}")
    return _node_trace(config, node)


def scenario_label_rules(config: ScenarioConfig) -> LabelRuleSet:
    """Rules that label exactly the samples derived from injected attack traffic.

    A session cut by a frame boundary can resume with a reply packet, giving a
    connection whose destination is the attacker; BP and FoT get a mirrored
    rule for that case. DoS traffic is one SYN per connection and never splits.
    """
    a = config.attack
    if a is None:
        return LabelRuleSet()
    if a.kind is ClassId.DOS:
        return LabelRuleSet((LabelRule(ClassId.DOS, src_ip=a.attacker_ip, flag="S0"),))
    return LabelRuleSet((
        LabelRule(a.kind, src_ip=a.attacker_ip, service="eth-rpc"),
        LabelRule(a.kind, dst_ip=a.attacker_ip),
    ))


# ---------------------------------------------------------------------------
# dataset building


@dataclass
class NodeDataset:
    node: int
    samples: list[FeatureVector] = field(default_factory=list)

    def class_counts(self) -> dict[ClassId, int]:
        counts = {c: 0 for c in ClassId}
        for v in self.samples:
            counts[v.label] += 1
        return counts


def capture_samples(config: ScenarioConfig, node: int) -> list[FeatureVector]:
    """Extract and label the samples one node sees in a scenario."""
    trace = generate_node_trace(config, node)
    return label_samples(extract_trace(trace), scenario_label_rules(config))


def downsample(samples: Sequence[FeatureVector], counts: Mapping[ClassId, int],
               rng: np.random.Generator) -> list[FeatureVector]:
    """Uniform sampling without replacement to at most ``counts[c]`` per class.

    Selected samples keep their original relative order.
    """
    by_class: dict[ClassId, list[int]] = {c: [] for c in ClassId}
    for i, v in enumerate(samples):
        by_class[v.label].append(i)
    keep: list[int] = []
    for c in ClassId:
        idx = by_class[c]
        n = min(int(counts.get(c, 0)), len(idx))
        if n:
            keep.extend(np.asarray(idx)[np.sort(rng.choice(len(idx), n, replace=False))].tolist())
    keep.sort()
    return [samples[i] for i in keep]


def _normal_rate(cfg: ScenarioConfig) -> float:
    # connections per second seen at one node in a benign capture
    return (cfg.benign_tx_rate + cfg.p2p_rate + cfg.discovery_rate + cfg.rpc_poll_rate
            + cfg.http_rate + cfg.ssh_rate)


def build_node_dataset(node: int, seed: int, counts: Mapping[ClassId, int] = FULL_NODE_COUNTS,
                       node_count: int = 3, intensities: Mapping[ClassId, float] | None = None,
                       benign_tx_rate: float = 2.0, margin: float = 1.3) -> NodeDataset:
    """Four captures (normal, BP, DoS, FoT) at one node, downsampled to ``counts``.

    Normal samples are drawn in equal shares from all four captures, so the
    node's normal class mixes quiet traffic with traffic recorded under attack.
    """
    intensities = dict(DEFAULT_INTENSITY, **(intensities or {}))
    normal_share = math.ceil(counts.get(ClassId.NORMAL, 0) / 4)
    base = ScenarioConfig(seed=seed, duration=1.0, node_count=node_count,
                          benign_tx_rate=benign_tx_rate)
    rate = _normal_rate(base)
    rng = fork(seed, "dataset", f"node{node}")
    samples: list[FeatureVector] = []
    for state in ClassId:
        want = {ClassId.NORMAL: normal_share}
        attack = None
        extra = 0.0
        if state is not ClassId.NORMAL:
            want[state] = counts.get(state, 0)
            attack_rate = intensities[state]
            if state is ClassId.FOT:
                extra = base.fot_gossip_factor * attack_rate
        duration = max(want.get(ClassId.NORMAL, 0) / (rate + extra),
                       want.get(state, 0) / attack_rate if state is not ClassId.NORMAL else 0.0)
        duration = max(10.0, math.ceil(duration * margin / 2.0) * 2.0)
        while True:
            if state is not ClassId.NORMAL:
                attack = AttackConfig(state, 0.0, intensities[state], targets=(node,))
            cfg = ScenarioConfig(seed=fork_seed(seed, "capture", state.name), duration=duration,
                                 node_count=node_count, benign_tx_rate=benign_tx_rate,
                                 attack=attack)
            got = capture_samples(cfg, node)
            have = {c: 0 for c in ClassId}
            for v in got:
                have[v.label] += 1
            if all(have[c] >= n for c, n in want.items()):
                break
            duration *= 1.5
        samples.extend(downsample(got, want, rng))
    final = {c: counts.get(c, 0) for c in ClassId}
    return NodeDataset(node, downsample(samples, final, rng))
