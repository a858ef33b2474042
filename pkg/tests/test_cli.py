import json
from pathlib import Path

import numpy as np
import pytest

from bcids import dbn
from bcids.cli import main
from bcids.traffic import PacketRecord, Protocol, read_features, write_trace

SMALL = (
    "[scenario]\nduration = 30.0\nnode_count = 3\n\n"
    "[attack]\nkind = \"DoS\"\nstart = 10.0\nstop = 20.0\n\n"
    "[train]\nmax_rounds = 40\nhidden_sizes = [16, 8]\npretrain_epochs = 1\n"
)


def run(out, *argv, config=None, seed=3):
    base = ["--out-dir", str(out), "--seed", str(seed)]
    if config is not None:
        base += ["--config", str(config)]
    return main(base + list(argv))


def last_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.toml"
    cfg.write_text(SMALL)
    gen, ext = root / "gen", root / "ext"
    assert run(gen, "generate", config=cfg) == 0
    for k in range(3):
        assert run(ext, "extract", str(gen / f"trace_node{k}.jsonl"), "--rules", str(gen / "rules.json"),
                   "--split", "0.2", config=cfg) == 0
    return root, cfg


def trains(root):
    return [str(root / "ext" / f"trace_node{k}_train.csv") for k in range(3)]


def held_out(root):
    return [str(root / "ext" / f"trace_node{k}_test.csv") for k in range(3)]


def test_generate_writes_traces_and_rules(pipeline):
    root, _ = pipeline
    for k in range(3):
        assert (root / "gen" / f"trace_node{k}.jsonl").stat().st_size > 0
    rules = json.loads((root / "gen" / "rules.json").read_text())
    assert rules["manifest"]["file"] == "manifest_generate.json"
    assert (root / "gen" / "manifest_generate.json").exists()


def test_attack_free_config_has_no_rules(tmp_path):
    cfg = tmp_path / "quiet.toml"
    cfg.write_text("[scenario]\nduration = 5.0\nnode_count = 2\n")
    assert run(tmp_path, "generate", config=cfg) == 0
    rules = json.loads((tmp_path / "rules.json").read_text())
    rules.pop("manifest")
    assert all(not v for v in rules.values())
    assert not (tmp_path / "trace_node2.jsonl").exists()


def test_manifest_records_hashes(pipeline):
    root, _ = pipeline
    man = json.loads((root / "gen" / "manifest_generate.json").read_text())
    assert man["seed"] == 3 and man["command"] == "generate"
    assert len(man["config_hash"]) == 64
    assert {Path(o["path"]).name for o in man["outputs"]} >= {"trace_node0.jsonl", "rules.json"}


def test_extract_empty_trace_gives_header_only(tmp_path):
    trace = tmp_path / "empty.jsonl"
    trace.write_text("")
    assert run(tmp_path, "extract", str(trace)) == 0
    lines = (tmp_path / "empty.csv").read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("duration,")


def test_extract_malformed_line_reports_position(tmp_path, capsys):
    trace = tmp_path / "bad.jsonl"
    good = PacketRecord(0.0, "10.0.0.1", "10.0.0.2", 1000, 80, Protocol.TCP, 60, frozenset({"SYN"}))
    write_trace([good], trace)
    trace.write_text(trace.read_text() + "{not json\n")
    assert run(tmp_path, "extract", str(trace)) == 2
    err = last_error(capsys)
    assert err["error"] == "ParseError" and err["line"] == 2


def test_extract_hand_built_trace(tmp_path):
    a, b = "10.0.0.1", "10.0.0.2"

    def p(t, src, dst, sport, dport, flags):
        return PacketRecord(t, src, dst, sport, dport, Protocol.TCP, 60, frozenset(flags))

    packets = [p(0.0, a, b, 1000, 80, {"SYN"}), p(0.1, b, a, 80, 1000, {"SYN", "ACK"}),
               p(0.2, a, b, 1000, 80, {"FIN", "ACK"}),
               p(0.3, a, b, 1001, 22, {"SYN"}),
               p(0.4, a, b, 1002, 22, {"SYN"}), p(0.5, b, a, 22, 1002, {"RST", "ACK"}),
               p(0.6, b, a, 5000, 30303, {"SYN"})]
    write_trace(packets, tmp_path / "t.jsonl")
    assert run(tmp_path, "extract", str(tmp_path / "t.jsonl")) == 0
    rows = read_features(tmp_path / "t.csv")
    assert len(rows) == 4
    assert sorted(v.category("flag") for v in rows) == ["REJ", "S0", "S0", "SF"]


def test_train_modes_write_expected_files(pipeline, tmp_path):
    root, cfg = pipeline
    assert run(tmp_path / "cel", "train", "cel", *trains(root), config=cfg) == 0
    assert [p.name for p in sorted((tmp_path / "cel").glob("model_*.json"))] == ["model_cel.json"]
    assert run(tmp_path / "il", "train", "il", *trains(root), config=cfg) == 0
    assert len(list((tmp_path / "il").glob("model_il_node*.json"))) == 3
    assert run(tmp_path / "col", "train", "col", *trains(root), config=cfg) == 0
    report = json.loads((tmp_path / "col" / "report_col.json").read_text())
    assert report["rounds_executed"] <= 40 and "converged" in report
    assert (tmp_path / "col" / "transcript_col.jsonl").exists()


def test_evaluate_rejects_empty_test_set(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    assert run(tmp_path, "train", "cel", trains(root)[0], config=cfg) == 0
    empty = tmp_path / "empty.csv"
    empty.write_text((root / "ext" / "trace_node0_test.csv").read_text().splitlines()[0] + "\n")
    assert run(tmp_path, "evaluate", "--models", str(tmp_path / "model_cel.json"), "--test", str(empty)) == 2
    assert last_error(capsys)["error"] == "EmptyMatrix"


def test_evaluate_identical_models_and_training_fit(pipeline, tmp_path):
    root, cfg = pipeline
    assert run(tmp_path, "train", "cel", *trains(root), config=cfg) == 0
    model = tmp_path / "model_cel.json"
    twin = tmp_path / "model_twin.json"
    twin.write_bytes(model.read_bytes())
    assert run(tmp_path / "held", "evaluate", "--models", str(model), str(twin), "--test", *held_out(root)) == 0
    rows = (tmp_path / "held" / "report.csv").read_text().splitlines()
    assert rows[1].split(",", 1)[1] == rows[2].split(",", 1)[1]
    assert run(tmp_path / "seen", "evaluate", "--models", str(model), "--test", *trains(root)) == 0
    held = json.loads((tmp_path / "held" / "report.json").read_text())["rows"][0]["accuracy_eq12"]
    seen = json.loads((tmp_path / "seen" / "report.json").read_text())["rows"][0]["accuracy_eq12"]
    assert seen >= held - 0.01


def test_evaluate_width_mismatch(pipeline, tmp_path, capsys):
    root, _ = pipeline
    bad = dbn.init_model(31, (4,), np.random.default_rng(0))
    dbn.save_model(bad, tmp_path / "model_bad.json")
    assert run(tmp_path, "evaluate", "--models", str(tmp_path / "model_bad.json"), "--test", *held_out(root)) == 2
    assert last_error(capsys)["error"] == "EncodingMismatch"


def test_detect_writes_one_verdict_per_frame(pipeline, tmp_path):
    root, cfg = pipeline
    assert run(tmp_path, "train", "cel", *trains(root), config=cfg) == 0
    trace = root / "gen" / "trace_node0.jsonl"
    assert run(tmp_path, "detect", str(tmp_path / "model_cel.json"), str(trace), config=cfg) == 0
    lines = (tmp_path / "verdicts.jsonl").read_text().splitlines()
    assert len(lines) == 15
    summary = json.loads((tmp_path / "detect_summary.json").read_text())
    assert summary["manifest"]["file"] == "manifest_detect.json"


def test_bench_single_sample(tmp_path):
    assert run(tmp_path, "bench", "-n", "1", "-r", "10", "--bins", "4") == 0
    assert len((tmp_path / "bench_taus.csv").read_text().splitlines()) == 11
    assert len((tmp_path / "bench_histogram.csv").read_text().splitlines()) == 5


def test_missing_file_and_bad_usage(tmp_path, capsys):
    assert run(tmp_path, "extract", str(tmp_path / "nope.jsonl")) == 2
    assert last_error(capsys)["error"] == "FileNotFoundError"
    assert main(["frobnicate"]) == 2
    assert last_error(capsys)["error"] == "UsageError"
