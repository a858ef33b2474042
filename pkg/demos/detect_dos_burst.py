"""Train a small detector on one node and replay a DoS episode through the frame detector."""

from __future__ import annotations

import argparse

from bcids.config import TrainConfig
from bcids.federated import LocalDataset, train_centralized
from bcids.stream import detect_stream, summarize
from bcids.synth import AttackConfig, ScenarioConfig, build_node_dataset, generate_node_trace
from bcids.traffic import ClassId


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rounds", type=int, default=600)
    args = ap.parse_args()

    counts = {ClassId.NORMAL: 1600, ClassId.BP: 160, ClassId.DOS: 160, ClassId.FOT: 160}
    data = build_node_dataset(0, seed=args.seed, counts=counts)
    cfg = TrainConfig(n_nodes=1, max_rounds=args.rounds, seed=args.seed)
    model = train_centralized([LocalDataset.from_vectors(data.samples)], cfg).model

    scenario = ScenarioConfig(seed=args.seed + 1, duration=40.0, attack=AttackConfig("DoS", 10.0, stop=30.0))
    verdicts = list(detect_stream(generate_node_trace(scenario, 0), model))
    for v in verdicts:
        flag = f"ALERT {v.alert.label.name} ({v.alert.confidence:.2f})" if v.alert else ""
        print(f"[{v.start:5.1f}s] n={v.n_samples:4d} state={v.dominant_state.name:<6} {flag}")
    print(summarize(verdicts))


if __name__ == "__main__":
    main()
