"""Command-line entry point: ``bcids <command>``.

Every command writes its outputs plus a ``manifest_<command>.json`` into
``--out-dir``. JSON artifacts embed a reference to that manifest (file name
and config hash); CSV and JSONL artifacts are listed in the manifest with
their SHA-256. Failures exit non-zero with one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__, dbn, stream
from ._seeding import fork
from .config import InvalidConfig as InvalidTrainConfig
from .config import TrainConfig
from .dbn import DbnError
from .experiment import BenchmarkConfig, build_benchmark, confusion, stratified_split
from .federated import FederationError, LocalDataset, train_centralized, train_collaborative, train_independent
from .metrics import EmptyMatrix, compare_report
from .stream import DetectConfig, UnsortedInput
from .synth import InvalidConfig, ScenarioConfig, generate_trace, scenario_from_mapping, scenario_label_rules
from .traffic import LabelRuleSet, ParseError, TrafficError, iter_trace, label_samples, read_features, \
    read_trace, extract_trace, write_features, write_trace

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class EncodingMismatch(ValueError):
    pass


class UsageError(ValueError):
    pass


DEFAULT_SCENARIO = {"duration": 120.0, "node_count": 3,
                    "attack": {"kind": "DoS", "start": 40.0, "stop": 80.0}}


# ---------------------------------------------------------------------------
# configuration and manifests


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc


def _root_seed(args, config: dict) -> int:
    if args.seed is not None:
        return int(args.seed)
    return int(config.get("seed", 0))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, command: str, args, effective_config: dict, seed: int):
        self.command = command
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self.config = effective_config
        self.config_hash = hashlib.sha256(_canonical(effective_config).encode()).hexdigest()
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.started = datetime.now(timezone.utc).isoformat()

    @property
    def manifest_name(self) -> str:
        return f"manifest_{self.command}.json"

    @property
    def reference(self) -> dict:
        return {"file": self.manifest_name, "config_hash": self.config_hash}

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.outputs.append(p)
        return p

    def read(self, path: str | Path) -> Path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"no such file: {p}")
        self.inputs.append(p)
        return p

    def write_json(self, name: str, obj: dict) -> Path:
        p = self.path(name)
        p.write_text(json.dumps({**obj, "manifest": self.reference}, indent=2, sort_keys=True) + "\n",
                     encoding="utf-8")
        return p

    def write_model(self, name: str, model: dbn.DbnModel) -> Path:
        p = self.path(name)
        obj = {**dbn.model_to_json(model), "manifest": self.reference}
        p.write_text(json.dumps(obj, separators=(",", ":")) + "\n", encoding="utf-8")
        return p

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "versions": {"bcids": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in self.inputs],
            "outputs": [{"path": str(p), "sha256": _sha256(p)} for p in self.outputs],
            "timestamps": {"started": self.started, "finished": datetime.now(timezone.utc).isoformat()},
        }
        p = self.out_dir / self.manifest_name
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p


def _train_config(config: dict, seed: int, n_nodes: int) -> TrainConfig:
    section = dict(config.get("train", {}))
    section["seed"] = seed
    section["n_nodes"] = n_nodes
    return TrainConfig.from_mapping(section)


def _load_dataset(run: Run, path: str) -> LocalDataset:
    return LocalDataset.from_vectors(read_features(run.read(path)))


def _load_model(run: Run, path: str) -> dbn.DbnModel:
    try:
        return dbn.load_model(run.read(path))
    except (KeyError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"{path}: not a model file ({exc})") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, config: dict) -> Run:
    seed = _root_seed(args, config)
    mapping = dict(config.get("scenario", DEFAULT_SCENARIO))
    if "attack" in config:
        mapping["attack"] = config["attack"]
    mapping["seed"] = seed
    scenario = scenario_from_mapping(mapping)
    run = Run("generate", args, {"scenario": scenario.to_json()}, seed)
    for k, trace in enumerate(generate_trace(scenario)):
        write_trace(trace, run.path(f"trace_node{k}.jsonl"))
    run.write_json("rules.json", scenario_label_rules(scenario).to_json())
    return run


def cmd_dataset(args, config: dict) -> Run:
    seed = _root_seed(args, config)
    section = dict(config.get("benchmark", {}))
    section["seed"] = seed
    try:
        bcfg = BenchmarkConfig(**section)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc
    run = Run("dataset", args, {"benchmark": bcfg.to_json()}, seed)
    for node in build_benchmark(bcfg).nodes:
        write_features(node.train, run.path(f"node{node.node}_train.csv"))
        write_features(node.test, run.path(f"node{node.node}_test.csv"))
    return run


def cmd_extract(args, config: dict) -> Run:
    seed = _root_seed(args, config)
    run = Run("extract", args, {"trace": Path(args.trace).name, "split": args.split}, seed)
    packets = read_trace(run.read(args.trace))
    rules = LabelRuleSet()
    if args.rules:
        obj = json.loads(run.read(args.rules).read_text(encoding="utf-8"))
        obj.pop("manifest", None)
        rules = LabelRuleSet.from_json(obj)
    samples = label_samples(extract_trace(packets), rules)
    stem = Path(args.trace).stem
    if args.split is None:
        write_features(samples, run.path(f"{stem}.csv"))
    else:
        train, test = stratified_split(samples, fork(seed, "split", stem), args.split)
        write_features(train, run.path(f"{stem}_train.csv"))
        write_features(test, run.path(f"{stem}_test.csv"))
    return run


def cmd_train(args, config: dict) -> Run:
    seed = _root_seed(args, config)
    if not args.datasets:
        raise UsageError("train needs at least one dataset")
    n_nodes = len(args.datasets) if args.mode == "col" else 1
    cfg = _train_config(config, seed, n_nodes)
    run = Run(f"train_{args.mode}", args, {"mode": args.mode, "train": cfg.to_json(),
                                           "datasets": [Path(d).name for d in args.datasets]}, seed)
    data = [_load_dataset(run, d) for d in args.datasets]
    if args.mode == "col":
        res = train_collaborative(data, cfg, workers=args.workers)
        run.write_model("model_col.json", res.model)
        res.bus.write_transcript(run.path("transcript_col.jsonl"))
        run.write_json("report_col.json", res.report.to_json())
    elif args.mode == "cel":
        res = train_centralized(data, cfg)
        run.write_model("model_cel.json", res.model)
        run.write_json("report_cel.json", res.report.to_json())
    else:
        results = train_independent(data, cfg)
        for k, res in enumerate(results):
            run.write_model(f"model_il_node{k}.json", res.model)
        run.write_json("report_il.json", {"nodes": [r.report.to_json() for r in results]})
    return run


def cmd_evaluate(args, config: dict) -> Run:
    seed = _root_seed(args, config)
    run = Run("evaluate", args, {"models": [Path(m).name for m in args.models],
                                 "tests": [Path(t).name for t in args.test]}, seed)
    models = [(Path(m).stem.removeprefix("model_"), _load_model(run, m)) for m in args.models]
    test = LocalDataset.concat([_load_dataset(run, t) for t in args.test])
    if len(test) == 0:
        raise EmptyMatrix("the merged test set is empty")
    rows = []
    for name, model in models:
        try:
            rows.append((name, confusion(model, test)))
        except (dbn.DimensionMismatch, dbn.UnknownCategory) as exc:
            raise EncodingMismatch(f"{name}: {exc}") from exc
    report = compare_report(rows)
    run.path("report.csv").write_text(report.to_csv(), encoding="utf-8")
    run.path("report.txt").write_text(report.to_text(), encoding="utf-8")
    run.write_json("report.json", {"rows": [{"model": n, **m.to_json(), "confusion": cm.to_json()}
                                            for (n, m), (_, cm) in zip(report.rows, rows)]})
    return run


def _detect_config(config: dict, args) -> DetectConfig:
    section = dict(config.get("detect", {}))
    if args.pipelined:
        section["pipelined"] = True
    try:
        return DetectConfig(**section)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc


def cmd_detect(args, config: dict) -> Run:
    seed = _root_seed(args, config)
    dcfg = _detect_config(config, args)
    run = Run("detect", args, {"detect": dcfg.__dict__, "model": Path(args.model).name,
                               "trace": Path(args.trace).name}, seed)
    model = _load_model(run, args.model)
    verdicts = list(stream.detect_stream(iter_trace(run.read(args.trace)), model, dcfg))
    stream.write_verdicts(verdicts, run.path("verdicts.jsonl"))
    run.write_json("detect_summary.json", stream.summarize(verdicts))
    return run


def cmd_bench(args, config: dict) -> Run:
    seed = _root_seed(args, config)
    run = Run("bench", args, {"n_samples": args.n, "repetitions": args.repetitions,
                              "model": args.model and Path(args.model).name,
                              "source": args.source and Path(args.source).name}, seed)
    if args.model:
        model = _load_model(run, args.model)
    else:
        hidden = tuple(config.get("train", {}).get("hidden_sizes", TrainConfig.hidden_sizes))
        model = dbn.init_model(dbn.EncodingSpec().width, hidden, fork(seed, "init"))
    source = run.read(args.source) if args.source else None
    result = stream.throughput_benchmark(model, args.n, args.repetitions, source=source, seed=seed)
    run.path("bench_taus.csv").write_text(result.taus_csv(), encoding="utf-8")
    run.path("bench_histogram.csv").write_text(result.histogram_csv(args.bins), encoding="utf-8")
    run.write_json("bench_summary.json", result.summary())
    return run


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bcids", description="Collaborative DBN intrusion detection toolkit.")
    p.add_argument("--config", help="TOML file with [scenario], [attack], [train], [benchmark], [detect]")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out-dir", default=".", help="directory for outputs (default: .)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("generate", help="simulate per-node packet traces and label rules")
    sub.add_parser("dataset", help="build the seeded non-IID multi-node benchmark CSVs")

    e = sub.add_parser("extract", help="trace JSONL -> feature CSV")
    e.add_argument("trace")
    e.add_argument("--rules", help="rules JSON (from generate)")
    e.add_argument("--split", type=float, help="stratified test fraction, e.g. 0.2")

    t = sub.add_parser("train", help="train in col, cel or il mode")
    t.add_argument("mode", choices=("col", "cel", "il"))
    t.add_argument("datasets", nargs="+", help="one training CSV per node")
    t.add_argument("--workers", type=int, default=1, help="threads for node gradients (col)")

    v = sub.add_parser("evaluate", help="score models on the merged test set")
    v.add_argument("--models", nargs="+", required=True)
    v.add_argument("--test", nargs="+", required=True)

    d = sub.add_parser("detect", help="replay a trace through the frame detector")
    d.add_argument("model")
    d.add_argument("trace")
    d.add_argument("--pipelined", action="store_true")

    b = sub.add_parser("bench", help="classification throughput benchmark")
    b.add_argument("--model", help="model file (default: seeded untrained default architecture)")
    b.add_argument("-n", type=int, default=85_000, help="samples per repetition")
    b.add_argument("-r", "--repetitions", type=int, default=1000)
    b.add_argument("--source", help="feature CSV to read samples from")
    b.add_argument("--bins", type=int, default=20)
    return p


COMMANDS = {"generate": cmd_generate, "dataset": cmd_dataset, "extract": cmd_extract,
            "train": cmd_train, "evaluate": cmd_evaluate, "detect": cmd_detect, "bench": cmd_bench}

_EXPECTED = (UsageError, InvalidConfig, InvalidTrainConfig, TrafficError, DbnError, FederationError,
             EmptyMatrix, EncodingMismatch, UnsortedInput, OSError, ValueError)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        config = load_config(args.config)
        run = COMMANDS[args.command](args, config)
        manifest = run.finish()
    except _EXPECTED as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, ParseError):
            err["line"] = exc.line
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, "manifest": str(manifest),
                      "outputs": [str(p) for p in run.outputs]}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
