"""Tracking-error metrics, report serialization and latency benchmarking."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError

REPORT_HEADER = [
    "sequence", "landmark", "n_frames", "mean_mm", "std_mm", "p95_mm", "max_mm",
    "latency_mean_ms", "latency_median_ms", "latency_p99_ms", "switch_failure", "errors_mm", "latency_ms",
]

REPORT_NOTE = (
    "All frames after the first are evaluated; challenge protocols score a subset of "
    "annotated frames, so absolute numbers are not directly comparable."
)


def euclidean_errors(predicted: dict, ground_truth: dict, spacing=(0.27, 0.27), skip=(0,)) -> tuple[list, np.ndarray]:
    """Per-frame ||pred - gt|| in mm over the ground-truth frames.

    ``predicted`` and ``ground_truth`` map frame index -> (x, y) image pixels.
    Frames listed in ``skip`` (the initialization frame by default) are left out.
    Returns ``(frames, errors_mm)``.
    """
    frames = sorted(f for f in ground_truth if f not in set(skip))
    missing = [f for f in frames if f not in predicted]
    if missing:
        shown = ", ".join(str(f) for f in missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise UsageError(f"prediction lacks {len(missing)} ground-truth frame(s): {shown}")
    if not frames:
        return [], np.zeros(0)
    p = np.array([predicted[f] for f in frames], dtype=np.float64)
    g = np.array([ground_truth[f] for f in frames], dtype=np.float64)
    sx, sy = spacing
    d = np.hypot((p[:, 0] - g[:, 0]) * sx, (p[:, 1] - g[:, 1]) * sy)
    return frames, d


def aggregate(series) -> tuple[float, float, float]:
    """(mean, population std, 95th percentile with linear interpolation)."""
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise UsageError("cannot aggregate an empty error series")
    mean = float(np.mean(x))
    std = float(np.sqrt(np.mean((x - mean) ** 2)))
    return mean, std, float(np.percentile(x, 95, method="linear"))


@dataclass
class LatencyStats:
    n_frames: int
    mean_ms: float
    median_ms: float
    p99_ms: float
    samples: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    @classmethod
    def from_samples(cls, samples) -> "LatencyStats":
        s = np.asarray(samples, dtype=np.float64)
        if s.size == 0:
            return cls(0, float("nan"), float("nan"), float("nan"), s)
        return cls(int(s.size), float(s.mean()), float(np.median(s)),
                   float(np.percentile(s, 99, method="linear")), s)


@dataclass
class TrackingReport:
    sequence: str
    landmark: str
    errors_mm: np.ndarray
    latency_ms: np.ndarray
    d_max_mm: float = 8.64

    @property
    def n_frames(self) -> int:
        return int(self.errors_mm.size)

    @property
    def summary(self) -> tuple[float, float, float]:
        return aggregate(self.errors_mm)

    @property
    def max_mm(self) -> float:
        return float(np.max(self.errors_mm))

    @property
    def latency(self) -> LatencyStats:
        return LatencyStats.from_samples(self.latency_ms)

    @property
    def switch_failure(self) -> bool:
        """True when the error ever exceeds 5 d_max, i.e. the tracker jumped to another structure."""
        return bool(np.any(self.errors_mm > 5.0 * self.d_max_mm))


def evaluate_trajectory(traj, ground_truth: dict, sequence: str, d_max_mm: float = 8.64) -> TrackingReport:
    """Report for a tracker trajectory against {frame: (x, y)} ground truth."""
    pred = traj.positions()
    frames, errors = euclidean_errors(pred, ground_truth, traj.spacing)
    lat = {r.frame: r.latency_ms for r in traj.results}
    return TrackingReport(sequence, traj.landmark, errors, np.array([lat[f] for f in frames]), d_max_mm)


def _series(values) -> str:
    return ";".join(repr(float(v)) for v in values)


def _parse_series(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(";")]) if text else np.zeros(0)


def write_report(path, reports) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for r in reports:
            mean, std, p95 = r.summary
            lat = r.latency
            w.writerow([r.sequence, r.landmark, r.n_frames, repr(mean), repr(std), repr(p95), repr(r.max_mm),
                        repr(lat.mean_ms), repr(lat.median_ms), repr(lat.p99_ms), int(r.switch_failure),
                        _series(r.errors_mm), _series(r.latency_ms)])


def read_report(path, d_max_mm: float = 8.64) -> list[TrackingReport]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_HEADER:
            raise DataError(f"{path}: not a tracking report")
        return [TrackingReport(row["sequence"], row["landmark"], _parse_series(row["errors_mm"]),
                               _parse_series(row["latency_ms"]), d_max_mm) for row in reader]


def summary_table(reports) -> str:
    lines = [REPORT_NOTE, "",
             f"{'sequence':<12} {'landmark':<10} {'frames':>6} {'mean mm':>8} {'std mm':>8} "
             f"{'p95 mm':>8} {'max mm':>8} {'ms/frame':>9}  switch"]
    for r in reports:
        mean, std, p95 = r.summary
        lines.append(f"{r.sequence:<12} {r.landmark:<10} {r.n_frames:>6} {mean:>8.3f} {std:>8.3f} "
                     f"{p95:>8.3f} {r.max_mm:>8.3f} {r.latency.mean_ms:>9.2f}  {'YES' if r.switch_failure else 'no'}")
    if reports:
        mean, std, p95 = aggregate(np.concatenate([r.errors_mm for r in reports]))
        lines.append(f"{'all':<12} {'':<10} {sum(r.n_frames for r in reports):>6} {mean:>8.3f} {std:>8.3f} {p95:>8.3f}")
    return "\n".join(lines)


def benchmark_latency(make_tracker, sequence, initial_xy, warmup: int = 5, repeats: int = 3) -> list[LatencyStats]:
    """Per-frame wall-clock latency of full tracking runs.

    ``make_tracker()`` returns a fresh :class:`~siamtrack.tracker.Tracker`.
    ``warmup`` frames are processed and discarded first; each of the ``repeats``
    measured runs then tracks frames 1..T-1. BLAS is pinned to one thread.
    """
    from threadpoolctl import threadpool_limits

    if warmup < 1:
        raise UsageError(f"warmup must be >= 1, got {warmup}")
    if len(sequence) < 2:
        raise UsageError("latency benchmark needs a sequence of at least 2 frames")
    frames = sequence.frames
    out = []
    with threadpool_limits(limits=1):
        tracker = make_tracker()
        tracker.start(frames[0], initial_xy)
        for i in range(warmup):
            tracker.step(frames[1 + i % (len(frames) - 1)], 1 + i % (len(frames) - 1))
        for _ in range(repeats):
            tracker = make_tracker()
            tracker.start(frames[0], initial_xy)
            samples = []
            for i in range(1, len(frames)):
                t0 = time.perf_counter()
                tracker.step(frames[i], i)
                samples.append((time.perf_counter() - t0) * 1e3)
            out.append(LatencyStats.from_samples(samples))
    return out
