"""Synchronous federated fine-tuning over a simulated in-process message layer.

Every node holds the same global model at the start of a round, computes a
gradient on its private data and uploads it. The server averages the uploads
(always summing in ascending node-id order, whatever the arrival order) and
steps the model by ``learning_rate``. Only gradients, models and aggregate
feature moments ever cross the wire.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dbn
from ._seeding import fork
from .config import InvalidConfig, TrainConfig
from .dbn import (
    DbnModel,
    DimensionMismatch,
    EmptyDataset,
    EncodingSpec,
    FeatureMoments,
    GradientBundle,
)
from .traffic import FeatureVector, to_matrix


class FederationError(Exception):
    pass


class EmptyInput(FederationError, ValueError):
    pass


class ShapeMismatch(FederationError, DimensionMismatch):
    pass


class StragglerTimeout(FederationError, TimeoutError):
    def __init__(self, round_index: int, node: int, latency: float, timeout: float):
        super().__init__(f"round {round_index}: node {node} took {latency:.3f}s (> {timeout:.3f}s)")
        self.round_index, self.node, self.latency, self.timeout = round_index, node, latency, timeout


class LeakError(FederationError, TypeError):
    """Raised when something other than a gradient, model or moment summary is sent."""


class ProtocolError(FederationError, RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data held by one node


@dataclass(frozen=True, eq=False)
class LocalDataset:
    """Raw (unencoded) feature matrix plus labels, kept on one node."""

    X_raw: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X_raw, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.shape != (len(X),):
            raise DimensionMismatch("X_raw must be (n, d) with one label per row")
        object.__setattr__(self, "X_raw", X)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector]) -> "LocalDataset":
        X, y = to_matrix(vectors)
        return cls(X, y)

    def __len__(self) -> int:
        return len(self.y)

    def canonical(self) -> "LocalDataset":
        """Rows in lexicographic order, so results do not depend on input order."""
        if len(self) == 0:
            return self
        keys = np.column_stack([self.X_raw, self.y])
        order = np.lexsort(keys.T[::-1])
        return LocalDataset(self.X_raw[order], self.y[order])

    @staticmethod
    def concat(parts: Sequence["LocalDataset"]) -> "LocalDataset":
        return LocalDataset(np.vstack([p.X_raw for p in parts]), np.concatenate([p.y for p in parts]))


def _as_dataset(d) -> LocalDataset:
    if isinstance(d, LocalDataset):
        return d
    if isinstance(d, tuple) and len(d) == 2:
        return LocalDataset(*d)
    return LocalDataset.from_vectors(list(d))


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True, eq=False)
class GlobalModel:
    round_index: int
    model: DbnModel


class MessageKind(str, Enum):
    MOMENTS_UP = "MomentsUp"
    MODEL_UP = "ModelUp"
    GRADIENT_UP = "GradientUp"
    MODEL_DOWN = "ModelDown"


_ALLOWED_PAYLOADS = {
    MessageKind.MOMENTS_UP: FeatureMoments,
    MessageKind.MODEL_UP: DbnModel,
    MessageKind.GRADIENT_UP: GradientBundle,
    MessageKind.MODEL_DOWN: GlobalModel,
}


def _payload_arrays(payload) -> list[np.ndarray]:
    if isinstance(payload, GradientBundle):
        return list(payload.arrays.values())
    if isinstance(payload, GlobalModel):
        payload = payload.model
    if isinstance(payload, DbnModel):
        return list(payload.params().values())
    if isinstance(payload, FeatureMoments):
        return [np.array([payload.count], dtype=np.float64), np.asarray(payload.mean), np.asarray(payload.m2)]
    raise LeakError(f"unsupported payload {type(payload).__name__}")


@dataclass(frozen=True, eq=False)
class RoundMessage:
    kind: MessageKind
    round_index: int
    node: int | None  # None for server broadcasts
    payload: object

    def __post_init__(self):
        kind = MessageKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if not isinstance(self.payload, _ALLOWED_PAYLOADS[kind]):
            raise LeakError(f"{kind.value} cannot carry {type(self.payload).__name__}")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in _payload_arrays(self.payload):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()

    def payload_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(a))) for a in _payload_arrays(self.payload))))

    def summary(self) -> dict:
        return {
            "kind": self.kind.value,
            "round": self.round_index,
            "node": self.node,
            "payload_type": type(self.payload).__name__,
            "payload_norm": self.payload_norm(),
            "checksum": self.checksum(),
        }


LatencyFn = Callable[[int, int], float]


class MessageLayer:
    """Simulated network between the server and the nodes.

    ``latency(node, round)`` gives the simulated upload delay in seconds; an
    upload slower than ``timeout`` fails the round. Every message is logged to
    the transcript together with its payload type, norm and checksum.
    """

    def __init__(self, latency: LatencyFn | None = None, timeout: float = 5.0):
        self.latency = latency or (lambda node, rnd: 0.0)
        self.timeout = float(timeout)
        self.messages: list[RoundMessage] = []

    def send(self, msg: RoundMessage) -> RoundMessage:
        if not isinstance(msg, RoundMessage):
            raise LeakError(f"only RoundMessage objects may be sent, got {type(msg).__name__}")
        self.messages.append(msg)
        return msg

    def gather(self, round_index: int, uploads: dict[int, RoundMessage]) -> dict[int, RoundMessage]:
        """Deliver a round's uploads in simulated arrival order, enforcing the timeout."""
        delays = {node: float(self.latency(node, round_index)) for node in uploads}
        for node in sorted(uploads, key=lambda n: (delays[n], n)):
            if delays[node] > self.timeout:
                raise StragglerTimeout(round_index, node, delays[node], self.timeout)
            self.send(uploads[node])
        return uploads

    @property
    def transcript(self) -> list[dict]:
        return [m.summary() for m in self.messages]

    def write_transcript(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.transcript:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# one round


def average_gradients(bundles: Sequence[GradientBundle]) -> GradientBundle:
    """Element-wise mean, summed in the order given."""
    if not bundles:
        raise EmptyInput("no gradients to average")
    shapes = bundles[0].shapes()
    for b in bundles[1:]:
        if b.shapes() != shapes:
            raise ShapeMismatch("gradient bundles are not shape-congruent")
    out = {}
    for k in shapes:
        acc = bundles[0][k].copy()
        for b in bundles[1:]:
            acc = acc + b[k]
        out[k] = acc / len(bundles)
    return GradientBundle(out)


@dataclass
class NodeState:
    node_id: int
    model: DbnModel
    X: np.ndarray  # encoded
    y: np.ndarray
    rng: np.random.Generator

    def local_gradient(self, cfg: TrainConfig) -> GradientBundle:
        X, y = self.X, self.y
        if cfg.local_batch is not None and cfg.local_batch < len(y):
            idx = np.sort(self.rng.choice(len(y), size=cfg.local_batch, replace=False))
            X, y = X[idx], y[idx]
        return dbn.total_gradient(self.model, X, y, cfg, self.rng)


@dataclass(frozen=True)
class ServerState:
    global_model: GlobalModel


@dataclass(frozen=True)
class RoundStats:
    round_index: int
    delta_norm: float
    gradient_norm: float
    node_gradient_norms: tuple[float, ...]

    def to_json(self) -> dict:
        return {"round": self.round_index, "delta_norm": self.delta_norm,
                "gradient_norm": self.gradient_norm,
                "node_gradient_norms": list(self.node_gradient_norms)}


def _compute_gradients(nodes: Sequence[NodeState], cfg: TrainConfig,
                       pool: ThreadPoolExecutor | None) -> list[GradientBundle]:
    if pool is None:
        return [n.local_gradient(cfg) for n in nodes]
    return list(pool.map(lambda n: n.local_gradient(cfg), nodes))


def run_round(server: ServerState, nodes: Sequence[NodeState], cfg: TrainConfig,
              bus: MessageLayer, pool: ThreadPoolExecutor | None = None
              ) -> tuple[ServerState, list[NodeState], RoundStats]:
    """Advance the federation by one synchronous round."""
    if not nodes:
        raise EmptyInput("a round needs at least one node")
    current = server.global_model
    for n in nodes:
        if n.model is not current.model and not dbn.models_equal(n.model, current.model):
            raise ProtocolError(f"node {n.node_id} is not synchronized with round {current.round_index}")

    grads = _compute_gradients(nodes, cfg, pool)
    uploads = {
        n.node_id: RoundMessage(MessageKind.GRADIENT_UP, current.round_index, n.node_id, g)
        for n, g in zip(nodes, grads)
    }
    delivered = bus.gather(current.round_index, uploads)
    ordered = [delivered[k].payload for k in sorted(delivered)]
    g_star = average_gradients(ordered)

    new_model = dbn.apply_update(current.model, g_star, cfg.learning_rate)
    new_global = GlobalModel(current.round_index + 1, new_model)
    bus.send(RoundMessage(MessageKind.MODEL_DOWN, new_global.round_index, None, new_global))
    for n in nodes:
        n.model = new_model

    stats = RoundStats(current.round_index, dbn.parameter_delta_norm(new_model, current.model),
                       g_star.norm(), tuple(g.norm() for g in ordered))
    return ServerState(new_global), list(nodes), stats


# ---------------------------------------------------------------------------
# full training runs


@dataclass
class RunReport:
    mode: str
    n_nodes: int
    rounds_executed: int = 0
    converged: bool = False
    final_delta_norm: float | None = None
    rounds: list[RoundStats] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"mode": self.mode, "n_nodes": self.n_nodes, "rounds_executed": self.rounds_executed,
                "converged": self.converged, "final_delta_norm": self.final_delta_norm,
                "rounds": [r.to_json() for r in self.rounds]}


@dataclass(frozen=True, eq=False)
class TrainingResult:
    global_model: GlobalModel
    report: RunReport
    bus: MessageLayer

    @property
    def model(self) -> DbnModel:
        return self.global_model.model


RoundCallback = Callable[[int, DbnModel], None]


def _initial_model(cfg: TrainConfig, spec: EncodingSpec) -> DbnModel:
    return dbn.init_model(spec.width, cfg.hidden_sizes, fork(cfg.seed, "init"), spec)


def _fine_tune(nodes: list[NodeState], initial: GlobalModel, cfg: TrainConfig, bus: MessageLayer,
               report: RunReport, on_round: RoundCallback | None, workers: int) -> GlobalModel:
    server = ServerState(initial)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 and len(nodes) > 1 else None
    try:
        for _ in range(cfg.max_rounds):
            server, nodes, stats = run_round(server, nodes, cfg, bus, pool)
            report.rounds.append(stats)
            report.rounds_executed += 1
            report.final_delta_norm = stats.delta_norm
            if on_round is not None:
                on_round(server.global_model.round_index, server.global_model.model)
            if stats.delta_norm < cfg.convergence_epsilon:
                report.converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return server.global_model


def train_collaborative(datasets: Sequence, cfg: TrainConfig, *, bus: MessageLayer | None = None,
                        on_round: RoundCallback | None = None, workers: int = 1,
                        initial: DbnModel | None = None) -> TrainingResult:
    """Collaborative training across ``len(datasets)`` nodes.

    Set-up exchanges only aggregates: nodes upload feature moments, the server
    merges them into one encoding, every node pre-trains the common seeded
    initial model on its own data, and the server averages the uploaded
    pre-trained models into the round-0 global model. Passing ``initial``
    skips pre-training and starts fine-tuning from that model.
    """
    parts = [_as_dataset(d).canonical() for d in datasets]
    if not parts:
        raise EmptyInput("no node datasets")
    if cfg.n_nodes != len(parts):
        raise InvalidConfig(f"config has n_nodes={cfg.n_nodes} but {len(parts)} datasets were given")
    for k, p in enumerate(parts):
        if len(p) == 0:
            raise EmptyDataset(f"node {k} has no training data")
    bus = bus or MessageLayer(timeout=cfg.straggler_timeout)

    if initial is None:
        moments = [bus.send(RoundMessage(MessageKind.MOMENTS_UP, 0, k, FeatureMoments.of(p.X_raw))).payload
                   for k, p in enumerate(parts)]
        spec = EncodingSpec.from_moments(FeatureMoments.merge(moments))
        start = _initial_model(cfg, spec)
        bus.send(RoundMessage(MessageKind.MODEL_DOWN, 0, None, GlobalModel(0, start)))
        pretrained = []
        for k, p in enumerate(parts):
            local = dbn.pretrain(start, dbn.encode_matrix(p.X_raw, spec), cfg,
                                 fork(cfg.seed, "pretrain", f"node{k}"))
            pretrained.append(bus.send(RoundMessage(MessageKind.MODEL_UP, 0, k, local)).payload)
        initial = dbn.average_models(pretrained)
    else:
        spec = initial.encoding
    phi0 = GlobalModel(0, initial)
    bus.send(RoundMessage(MessageKind.MODEL_DOWN, 0, None, phi0))

    nodes = [
        NodeState(k, initial, dbn.encode_matrix(p.X_raw, spec), p.y, fork(cfg.seed, "batches", f"node{k}"))
        for k, p in enumerate(parts)
    ]
    report = RunReport("col", len(parts))
    final = _fine_tune(nodes, phi0, cfg, bus, report, on_round, workers)
    return TrainingResult(final, report, bus)


def train_centralized(datasets: Sequence, cfg: TrainConfig, *, on_round: RoundCallback | None = None,
                      initial: DbnModel | None = None) -> TrainingResult:
    """Pool every node's data in one place and train a single model."""
    parts = [_as_dataset(d) for d in datasets]
    if not parts:
        raise EmptyInput("no datasets")
    pooled = LocalDataset.concat(parts)
    if len(pooled) == 0:
        raise EmptyDataset("no training data")
    result = train_collaborative([pooled], cfg.replace(n_nodes=1), on_round=on_round, initial=initial)
    result.report.mode = "cel"
    return result


def train_independent(datasets: Sequence, cfg: TrainConfig) -> list[TrainingResult]:
    """One model per node, trained only on that node's data."""
    parts = [_as_dataset(d) for d in datasets]
    if not parts:
        raise EmptyInput("no datasets")
    out = []
    for p in parts:
        r = train_centralized([p], cfg)
        r.report.mode = "il"
        out.append(r)
    return out
