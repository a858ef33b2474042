"""Replay detection: cut a packet stream into frames, classify every sample, emit verdicts.

Also hosts the throughput benchmark, which times the read, encode and
classify path over a CSV of pre-extracted samples.
"""

from __future__ import annotations

import json
import queue
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import pyarrow as pa
import pyarrow.compute as pc
import pyarrow.csv as pacsv

from . import dbn
from ._seeding import fork
from .dbn import DbnModel
from .traffic import (
    CSV_HEADER,
    DEFAULT_FRAME_LENGTH,
    DEFAULT_IDLE_TIMEOUT,
    DISCRETE_INDEX,
    FEATURE_NAMES,
    N_CLASSES,
    VOCABULARIES,
    ClassId,
    Frame,
    PacketRecord,
    ParseError,
    extract_frame,
    frame_index_of,
    make_frame,
    to_matrix,
    write_features,
)


class UnsortedInput(ValueError):
    def __init__(self, position: int, timestamp: float, previous: float):
        super().__init__(f"record {position}: timestamp {timestamp} precedes {previous}")
        self.position = position


@dataclass(frozen=True)
class DetectConfig:
    frame_length: float = DEFAULT_FRAME_LENGTH
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT
    alert_fraction: float = 0.10
    alert_min_count: int = 5
    pipelined: bool = False
    queue_size: int = 8

    def __post_init__(self):
        if not self.frame_length > 0 or not self.idle_timeout > 0:
            raise ValueError("frame_length and idle_timeout must be > 0")
        if not 0.0 <= self.alert_fraction <= 1.0 or self.alert_min_count < 0:
            raise ValueError("alert thresholds out of range")
        if self.queue_size < 1:
            raise ValueError("queue_size must be >= 1")


@dataclass(frozen=True)
class Alert:
    label: ClassId
    confidence: float  # mean posterior of ``label`` over the samples assigned to it


@dataclass(frozen=True)
class FrameVerdict:
    frame_index: int
    start: float
    counts: tuple[int, ...]
    dominant_state: ClassId
    alert: Alert | None
    processing_time: float
    deadline_overrun: bool

    @property
    def n_samples(self) -> int:
        return sum(self.counts)

    def decision(self) -> tuple:
        """Everything except timing, for comparing runs."""
        alert = None if self.alert is None else (int(self.alert.label), self.alert.confidence)
        return (self.frame_index, self.start, self.counts, int(self.dominant_state), alert)

    def to_json(self) -> dict:
        return {
            "frame_index": self.frame_index,
            "start": self.start,
            "counts": list(self.counts),
            "dominant_state": self.dominant_state.name,
            "alert": None if self.alert is None else {"class": self.alert.label.name,
                                                      "confidence": self.alert.confidence},
            "processing_time": self.processing_time,
            "deadline_overrun": self.deadline_overrun,
        }


def decide(pred: np.ndarray, probs: np.ndarray, cfg: DetectConfig) -> tuple[tuple[int, ...], ClassId, Alert | None]:
    """Per-class counts, majority state (ties to the lower id) and the alert, if any."""
    counts = np.bincount(pred, minlength=N_CLASSES)
    dominant = ClassId(int(np.argmax(counts)))
    n = int(counts.sum())
    firing = [c for c in range(1, N_CLASSES)
              if counts[c] >= cfg.alert_min_count and counts[c] >= cfg.alert_fraction * n and counts[c] > 0]
    alert = None
    if firing:
        c = max(firing, key=lambda k: (counts[k], -k))
        alert = Alert(ClassId(c), float(probs[pred == c, c].mean()))
    return tuple(int(x) for x in counts), dominant, alert


def classify_frame(frame: Frame, model: DbnModel) -> tuple[np.ndarray, np.ndarray]:
    samples = extract_frame(frame)
    if not samples:
        return np.zeros(0, dtype=np.int64), np.zeros((0, N_CLASSES))
    X_raw, _ = to_matrix(samples)
    _, probs = dbn.forward_batch(model, dbn.encode_matrix(X_raw, model.encoding))
    return np.argmax(probs, axis=1), probs


def _ordered_buckets(trace: Iterable[PacketRecord], cfg: DetectConfig
                     ) -> Iterator[tuple[int, list[PacketRecord]]]:
    """Frame buckets from the first occupied frame to the last, gaps included as empty."""
    current: int | None = None
    bucket: list[PacketRecord] = []
    prev = -np.inf
    for pos, p in enumerate(trace):
        if p.timestamp < prev:
            raise UnsortedInput(pos, p.timestamp, prev)
        prev = p.timestamp
        idx = frame_index_of(p.timestamp, cfg.frame_length)
        if current is None:
            current = idx
        while idx > current:
            yield current, bucket
            bucket = []
            current += 1
        bucket.append(p)
    if current is not None:
        yield current, bucket


def _verdict(idx: int, frame: Frame, model: DbnModel, cfg: DetectConfig, t0: float) -> FrameVerdict:
    pred, probs = classify_frame(frame, model)
    counts, dominant, alert = decide(pred, probs, cfg)
    tau = time.perf_counter() - t0
    return FrameVerdict(idx, frame.start, counts, dominant, alert, tau, tau > cfg.frame_length)


def _sequential(trace, model, cfg) -> Iterator[FrameVerdict]:
    for idx, packets in _ordered_buckets(trace, cfg):
        t0 = time.perf_counter()
        frame = make_frame(idx, packets, cfg.frame_length, cfg.idle_timeout)
        yield _verdict(idx, frame, model, cfg, t0)


_DONE = object()


def _pipelined(trace, model, cfg) -> Iterator[FrameVerdict]:
    # stage 1 (thread): framing and connection assembly; stage 2 (caller): extraction and classification
    handoff: queue.Queue = queue.Queue(maxsize=cfg.queue_size)
    stop = threading.Event()

    def put(item):
        while not stop.is_set():
            try:
                handoff.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def assemble():
        try:
            for idx, packets in _ordered_buckets(trace, cfg):
                t0 = time.perf_counter()
                put((idx, make_frame(idx, packets, cfg.frame_length, cfg.idle_timeout), t0))
                if stop.is_set():
                    return
            put(_DONE)
        except BaseException as exc:  # surfaced in the consumer
            put(exc)

    worker = threading.Thread(target=assemble, daemon=True)
    worker.start()
    try:
        while True:
            item = handoff.get()
            if item is _DONE:
                break
            if isinstance(item, BaseException):
                raise item
            idx, frame, t0 = item
            yield _verdict(idx, frame, model, cfg, t0)
    finally:
        stop.set()
        worker.join()


def detect_stream(trace: Iterable[PacketRecord], model: DbnModel,
                  cfg: DetectConfig = DetectConfig()) -> Iterator[FrameVerdict]:
    """Lazily yield one verdict per frame, in frame order.

    Frames are tumbling windows at multiples of ``frame_length``; frames with no
    packets between occupied ones still get a (zero-count) verdict. Raises
    :class:`UnsortedInput` as soon as a timestamp goes backwards.
    """
    return _pipelined(trace, model, cfg) if cfg.pipelined else _sequential(trace, model, cfg)


def write_verdicts(verdicts: Iterable[FrameVerdict], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(json.dumps(v.to_json(), sort_keys=True) + "\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# throughput


def load_feature_matrix(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Fast columnar read of a feature CSV into ``(X_raw, y)``.

    Produces the same matrix as ``to_matrix(read_features(path))``; the
    arrow parser rounds decimal floats correctly, so values match bit for bit.
    """
    discrete = {FEATURE_NAMES[i] for i in DISCRETE_INDEX.values()}
    try:
        table = pacsv.read_csv(path, convert_options=pacsv.ConvertOptions(
            column_types={n: pa.string() for n in discrete}, strings_can_be_null=False))
    except pa.ArrowInvalid as exc:
        raise ParseError(0, str(exc)) from exc
    if tuple(table.column_names) != CSV_HEADER:
        raise ParseError(1, "unexpected header")
    X = np.empty((table.num_rows, len(FEATURE_NAMES)), dtype=np.float64)
    for i, name in enumerate(FEATURE_NAMES):
        col = table.column(name)
        if name in discrete:
            codes = pc.index_in(col, value_set=pa.array(VOCABULARIES[name]))
            if codes.null_count:
                bad = int(np.flatnonzero(codes.is_null().to_numpy(zero_copy_only=False))[0])
                raise ParseError(bad + 2, f"unknown {name} {col[bad].as_py()!r}")
            col = codes
        X[:, i] = col.to_numpy().astype(np.float64, copy=False)
    return X, table.column("label").to_numpy().astype(np.int64, copy=False)


def make_benchmark_csv(path: str | Path, n_samples: int, seed: int = 0) -> None:
    """Write ``n_samples`` realistic samples (resampled from a seeded capture) to a CSV."""
    from .synth import AttackConfig, ScenarioConfig, capture_samples

    pool = []
    for kind in ("BP", "DoS", "FoT"):
        cfg = ScenarioConfig(seed=seed, duration=20.0, attack=AttackConfig(kind, 4.0, stop=16.0))
        pool.extend(capture_samples(cfg, 0))
    pick = fork(seed, "bench", "samples").integers(0, len(pool), n_samples)
    write_features((pool[i] for i in pick), path)


@dataclass(frozen=True)
class ThroughputResult:
    n_samples: int
    taus: np.ndarray

    @property
    def p50(self) -> float:
        return float(np.percentile(self.taus, 50))

    @property
    def p98(self) -> float:
        return float(np.percentile(self.taus, 98))

    @property
    def mean(self) -> float:
        return float(self.taus.mean())

    def histogram(self, bins: int = 20) -> list[tuple[float, float, int]]:
        counts, edges = np.histogram(self.taus, bins=bins)
        return [(float(lo), float(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]

    def taus_csv(self) -> str:
        lines = ["repetition,tau_s"] + [f"{i},{t!r}" for i, t in enumerate(self.taus.tolist())]
        return "\n".join(lines) + "\n"

    def histogram_csv(self, bins: int = 20) -> str:
        p50, p98 = self.p50, self.p98
        lines = ["bucket_lo_s,bucket_hi_s,count,p50_s,p98_s"]
        lines += [f"{lo!r},{hi!r},{c},{p50!r},{p98!r}" for lo, hi, c in self.histogram(bins)]
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {"n_samples": self.n_samples, "repetitions": len(self.taus), "p50_s": self.p50,
                "p98_s": self.p98, "mean_s": self.mean, "max_s": float(self.taus.max())}


def time_classification(model: DbnModel, csv_path: str | Path) -> float:
    t0 = time.perf_counter()
    X_raw, _ = load_feature_matrix(csv_path)
    dbn.predict_batch(model, dbn.encode_matrix(X_raw, model.encoding))
    return time.perf_counter() - t0


def throughput_benchmark(model: DbnModel, n_samples: int, repetitions: int,
                         source: str | Path | None = None, seed: int = 0) -> ThroughputResult:
    """Time read, encode and classify of ``n_samples`` stored samples, ``repetitions`` times.

    Without ``source`` a seeded sample file is generated first (outside the timing).
    """
    if n_samples < 1 or repetitions < 1:
        raise ValueError("n_samples and repetitions must be >= 1")
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "samples.csv"
        if source is None:
            make_benchmark_csv(path, n_samples, seed)
        else:
            with open(source, encoding="utf-8") as src, open(path, "w", encoding="utf-8") as dst:
                rows = -1
                for line in src:
                    if rows == n_samples:
                        break
                    dst.write(line)
                    rows += 1
            if rows < n_samples:
                raise ValueError(f"{source} holds {max(rows, 0)} samples, fewer than {n_samples}")
        taus = np.array([time_classification(model, path) for _ in range(repetitions)])
    return ThroughputResult(n_samples, taus)


def summarize(verdicts: Sequence[FrameVerdict]) -> dict:
    n = len(verdicts)
    return {
        "frames": n,
        "alerts": sum(v.alert is not None for v in verdicts),
        "dominant_state_counts": {c.name: sum(v.dominant_state is c for v in verdicts) for c in ClassId},
        "deadline_overruns": sum(v.deadline_overrun for v in verdicts),
        "max_processing_time": max((v.processing_time for v in verdicts), default=0.0),
    }
