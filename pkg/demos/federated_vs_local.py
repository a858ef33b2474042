"""Compare collaborative, centralized and per-node training on a reduced non-IID benchmark."""

from __future__ import annotations

import argparse

from bcids.config import TrainConfig
from bcids.experiment import BenchmarkConfig, build_benchmark, compare_modes


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scale", type=float, default=0.05, help="fraction of the full per-node counts")
    ap.add_argument("--rounds", type=int, default=800)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    bench = build_benchmark(BenchmarkConfig(seed=args.seed, scale=args.scale))
    for node in bench.nodes:
        print(f"node {node.node}: {len(node.train)} train / {len(node.test)} test samples")
    result = compare_modes(bench, TrainConfig(seed=args.seed, max_rounds=args.rounds), workers=args.workers)
    print(result.report.to_text())
    rep = result.collaborative.report
    print(f"collaborative run: {rep.rounds_executed} rounds, converged={rep.converged}")


if __name__ == "__main__":
    main()
