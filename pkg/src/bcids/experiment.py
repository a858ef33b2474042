"""The seeded multi-node benchmark: data, splits and the CoL / CeL / IL comparison."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import dbn
from ._seeding import fork
from .config import TrainConfig
from .federated import LocalDataset, TrainingResult, train_centralized, train_collaborative, train_independent
from .metrics import ConfusionMatrix, Report, compare_report, from_arrays
from .synth import FULL_NODE_COUNTS, build_node_dataset
from .traffic import ClassId, FeatureVector


def stratified_split(samples: Sequence[FeatureVector], rng: np.random.Generator,
                     test_fraction: float = 0.2) -> tuple[list[FeatureVector], list[FeatureVector]]:
    """Per-class random split; each class sends ``round(n * test_fraction)`` samples to test."""
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError("test_fraction must lie in [0, 1]")
    test_idx: list[int] = []
    for c in ClassId:
        idx = np.array([i for i, v in enumerate(samples) if v.label is c], dtype=np.int64)
        n_test = int(round(len(idx) * test_fraction))
        if n_test:
            test_idx.extend(idx[rng.choice(len(idx), n_test, replace=False)].tolist())
    chosen = set(test_idx)
    train = [v for i, v in enumerate(samples) if i not in chosen]
    test = [samples[i] for i in sorted(chosen)]
    return train, test


def skew_node(samples: Sequence[FeatureVector], scarce: ClassId, keep_fraction: float,
              rng: np.random.Generator) -> list[FeatureVector]:
    """Drop all but ``keep_fraction`` of one class, keeping sample order."""
    idx = [i for i, v in enumerate(samples) if v.label is scarce]
    n_keep = int(round(len(idx) * keep_fraction))
    kept = set(np.asarray(idx)[rng.choice(len(idx), n_keep, replace=False)].tolist()) if idx else set()
    return [v for i, v in enumerate(samples) if v.label is not scarce or i in kept]


@dataclass(frozen=True)
class BenchmarkConfig:
    """Benchmark shape. Node k keeps only ``skew_keep_fraction`` of attack class ``k % 3 + 1``."""

    seed: int = 0
    n_nodes: int = 3
    scale: float = 0.2
    skew_keep_fraction: float = 0.0
    test_fraction: float = 0.2

    def counts(self) -> dict[ClassId, int]:
        return {c: max(1, int(round(n * self.scale))) for c, n in FULL_NODE_COUNTS.items()}

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class NodeSplit:
    node: int
    train: list[FeatureVector]
    test: list[FeatureVector]


@dataclass
class Benchmark:
    config: BenchmarkConfig
    nodes: list[NodeSplit] = field(default_factory=list)

    @property
    def train_sets(self) -> list[LocalDataset]:
        return [LocalDataset.from_vectors(n.train) for n in self.nodes]

    @property
    def merged_test(self) -> LocalDataset:
        return LocalDataset.from_vectors([v for n in self.nodes for v in n.test])


def build_benchmark(cfg: BenchmarkConfig = BenchmarkConfig()) -> Benchmark:
    bench = Benchmark(cfg)
    for k in range(cfg.n_nodes):
        data = build_node_dataset(k, cfg.seed, cfg.counts(), node_count=cfg.n_nodes)
        rng = fork(cfg.seed, "benchmark", f"node{k}")
        samples = skew_node(data.samples, ClassId(k % 3 + 1), cfg.skew_keep_fraction, rng)
        train, test = stratified_split(samples, rng, cfg.test_fraction)
        bench.nodes.append(NodeSplit(k, train, test))
    return bench


def confusion(model: dbn.DbnModel, data: LocalDataset) -> ConfusionMatrix:
    X = dbn.encode_matrix(data.X_raw, model.encoding)
    return from_arrays(data.y, dbn.predict_batch(model, X))


@dataclass
class Comparison:
    report: Report
    collaborative: TrainingResult
    centralized: TrainingResult
    independent: list[TrainingResult]


def compare_modes(bench: Benchmark, cfg: TrainConfig, workers: int = 1) -> Comparison:
    """Train CoL, CeL and one IL model per node, then score all on the merged test set."""
    train = bench.train_sets
    test = bench.merged_test
    cfg = cfg.replace(n_nodes=len(train))
    col = train_collaborative(train, cfg, workers=workers)
    cel = train_centralized(train, cfg)
    il = train_independent(train, cfg)
    rows = [("CoL", confusion(col.model, test)), ("CeL", confusion(cel.model, test))]
    rows += [(f"IL-{k + 1}", confusion(r.model, test)) for k, r in enumerate(il)]
    return Comparison(compare_report(rows), col, cel, il)
