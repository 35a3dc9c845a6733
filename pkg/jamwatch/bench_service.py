"""Per-sample classification latency.

Every trial times the whole detection path for one frame: load the IQ slice,
build the neg-log spectrogram, run the model, compare the score with tau.
"""

from __future__ import annotations

import contextlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np
import torch
from tqdm import tqdm

from jamwatch.artifact_io import write_csv, write_json
from jamwatch.detector_service import decide, score
from jamwatch.enums import ModelKind
from jamwatch.errors import ArgumentError, SourceExhaustedError
from jamwatch.iq_simulation_service import IQFileSource
from jamwatch.nn_engine import Network
from jamwatch.spectrogram_service import DEFAULT_EPSILON, DEFAULT_N, DEFAULT_ROWS, SpectrogramService, frame_to_input

logger = logging.getLogger(__name__)

WARMUP_TRIALS = 10
# reference p95 latencies measured on a CPU workstation with the full-size models
REFERENCE_P95_MS = {ModelKind.CAE: 48.0, ModelKind.CNN: 46.0}


@dataclass(frozen=True)
class LatencySample:
    trial: int
    elapsed_ms: float


@dataclass
class BenchReport:
    samples: list[LatencySample]
    warmup: list[LatencySample] = field(default_factory=list)
    model_kind: Optional[ModelKind] = None

    @property
    def sorted_ms(self) -> np.ndarray:
        return np.sort(np.array([s.elapsed_ms for s in self.samples], dtype=np.float64))

    def cdf(self) -> list[dict[str, float]]:
        """(elapsed_ms, k / trials) ascending; the last point is 1.0."""
        ms = self.sorted_ms
        return [{"elapsed_ms": float(v), "cdf": (k + 1) / len(ms)} for k, v in enumerate(ms)]

    def percentile(self, q: float) -> float:
        if not self.samples:
            raise ArgumentError("no latency samples recorded", field="trials")
        return float(np.percentile(self.sorted_ms, q))

    def summary(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "trials": len(self.samples),
            "warmup_trials": len(self.warmup),
            "model_kind": str(self.model_kind) if self.model_kind else None,
            "p50": self.percentile(50),
            "p95": self.percentile(95),
            "p99": self.percentile(99),
        }
        if self.model_kind in REFERENCE_P95_MS:
            out["reference_p95"] = REFERENCE_P95_MS[self.model_kind]
        return out


@contextlib.contextmanager
def single_thread() -> Iterator[None]:
    """Pins torch intra-op threads to one for the duration of the block."""
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def _elapsed_ms(start_ns: int, stop_ns: int) -> float:
    # microsecond resolution, never zero
    micros = max(1, round((stop_ns - start_ns) / 1000))
    return micros / 1000.0


def time_pipeline(
    net: Network,
    source: IQFileSource,
    threshold: float,
    trials: int = 1000,
    n: int = DEFAULT_N,
    rows: int = DEFAULT_ROWS,
    epsilon: float = DEFAULT_EPSILON,
    warmup: int = WARMUP_TRIALS,
    model_kind: Optional[ModelKind] = None,
    progress: bool = False,
) -> BenchReport:
    """Times `warmup + trials` end-to-end detections; warm-up trials are kept apart from the percentiles.

    Raises SourceExhaustedError carrying the completed samples when the source
    runs out of frames and does not cycle.
    """
    if trials < 1:
        raise ArgumentError(f"trials must be at least 1, got {trials}", field="trials")
    if warmup < 0:
        raise ArgumentError(f"warmup must be non-negative, got {warmup}", field="warmup")

    report = BenchReport(samples=[], model_kind=ModelKind(model_kind) if model_kind else None)
    total = warmup + trials
    net.eval()
    with single_thread():
        for i in tqdm(range(total), desc="bench", unit="trial", disable=not progress):
            if not source.cycle and i >= len(source):
                logger.warning("IQ source exhausted after %d of %d trials", i, total)
                raise SourceExhaustedError(
                    f"IQ source holds {len(source)} frames, {total} trials requested",
                    completed=list(report.samples),
                )
            start = time.perf_counter_ns()
            frame = source.load(i)
            spec = frame_to_input(frame, n=n, rows=rows, epsilon=epsilon)
            decide(score(net, spec), threshold)
            stop = time.perf_counter_ns()

            if i < warmup:
                report.warmup.append(LatencySample(trial=i, elapsed_ms=_elapsed_ms(start, stop)))
            else:
                report.samples.append(LatencySample(trial=i - warmup, elapsed_ms=_elapsed_ms(start, stop)))

    logger.info("p95 latency %.3f ms over %d trials", report.percentile(95), trials)
    return report


def write_latency_csv(samples: list[LatencySample], path: Path) -> None:
    rows = [{"trial": s.trial, "elapsed_ms": s.elapsed_ms} for s in samples]
    write_csv(Path(path), rows, ["trial", "elapsed_ms"])


def write_bench_summary(report: BenchReport, path: Path, extra: Optional[dict[str, Any]] = None) -> dict[str, Any]:
    payload = {**report.summary(), **(extra or {})}
    write_json(Path(path), payload)
    return payload


class BenchService:
    """Times the deployed detection path of one model at a fixed threshold."""

    def __init__(self, net: Network, threshold: float, spectrogram: SpectrogramService, model_kind: Optional[ModelKind] = None):
        self.net = net
        self.threshold = threshold
        self.spectrogram = spectrogram
        self.model_kind = ModelKind(model_kind) if model_kind else None

    def run(self, source: IQFileSource, trials: int = 1000, warmup: int = WARMUP_TRIALS, progress: bool = False) -> BenchReport:
        return time_pipeline(
            self.net,
            source,
            threshold=self.threshold,
            trials=trials,
            n=self.spectrogram.n,
            rows=self.spectrogram.rows,
            epsilon=self.spectrogram.epsilon,
            warmup=warmup,
            model_kind=self.model_kind,
            progress=progress,
        )

    def write(self, report: BenchReport, directory: Path, extra: Optional[dict[str, Any]] = None) -> dict[str, Any]:
        write_latency_csv(report.samples, Path(directory) / "latency.csv")
        return write_bench_summary(report, Path(directory) / "summary.json", extra)
