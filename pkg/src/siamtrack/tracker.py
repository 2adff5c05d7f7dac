"""Frame-by-frame landmark localization with a running-average location prior.

All tracker-internal positions are (row, col) in search-patch pixels. The
coarse similarity map is bilinearly upsampled by the network stride, so the
prior, the regularization and the constrained argmax all live on a grid with
one-pixel spacing whose origin is the search position of map index (0, 0).
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data
from .errors import ConfigError, DataError, UsageError
from .siamese import SimilarityMap, as_batch, gaussian_map, template_spectrum, cross_correlate_fft
from .tensor.memory import keep_freed_memory
from .tensor.network import Network

TRAJECTORY_HEADER = ["frame", "x_px", "y_px", "x_mm", "y_mm", "score", "latency_ms", "lost_flag"]


def time_weight(t: float, k: float = 0.5, tau: float = 50.0) -> float:
    """Prior weight k * tanh(t / tau) after ``t`` prior updates."""
    return k * math.tanh(t / tau)


def regularize(scores: np.ndarray, prior: np.ndarray, weight: float) -> np.ndarray:
    """scores * (1 - weight * (1 - prior)), elementwise."""
    if scores.shape != prior.shape:
        raise RuntimeError(f"similarity map {scores.shape} and prior {prior.shape} differ in shape")
    return scores * (1.0 - weight * (1.0 - prior))


def constrained_argmax(values: np.ndarray, prev, d_max: float, origin=(0.0, 0.0), step: float = 1.0):
    """Index of the maximum among grid points strictly closer than ``d_max`` to ``prev``.

    Grid point (i, j) sits at ``origin + step * (i, j)``. Ties go to the point
    nearest ``prev``, then to row-major order. Returns None when no grid point
    is within range.
    """
    rows, cols = values.shape
    pr = (prev[0] - origin[0]) / step
    pc = (prev[1] - origin[1]) / step
    reach = d_max / step
    r0, r1 = max(0, math.floor(pr - reach)), min(rows - 1, math.ceil(pr + reach))
    c0, c1 = max(0, math.floor(pc - reach)), min(cols - 1, math.ceil(pc + reach))
    if r0 > r1 or c0 > c1:
        return None
    rr = np.arange(r0, r1 + 1)
    cc = np.arange(c0, c1 + 1)
    dr = origin[0] + step * rr - prev[0]
    dc = origin[1] + step * cc - prev[1]
    d2 = dr[:, None] ** 2 + dc[None, :] ** 2
    inside = d2 < d_max * d_max
    if not inside.any():
        return None
    window = values[r0:r1 + 1, c0:c1 + 1]
    best = window[inside].max()
    cand = inside & (window == best)
    ci, cj = np.nonzero(cand)  # row-major order
    k = int(np.argmin(d2[ci, cj]))  # first minimum keeps row-major tie order
    return int(ci[k] + r0), int(cj[k] + c0)


def upsample_matrix(n: int, factor: int) -> np.ndarray:
    """((n-1)*factor+1, n) linear interpolation weights, corner-aligned."""
    m = (n - 1) * factor + 1
    pos = np.arange(m) / factor
    lo = np.minimum(np.floor(pos).astype(int), n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    u = np.zeros((m, n))
    u[np.arange(m), lo] += 1.0 - frac
    u[np.arange(m), hi] += frac
    return u


def upsample_bilinear(values: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return values.astype(np.float64)
    ur = upsample_matrix(values.shape[0], factor)
    uc = upsample_matrix(values.shape[1], factor)
    return ur @ values.astype(np.float64) @ uc.T


@dataclass
class TrackerState:
    prior: np.ndarray  # G*, on the upsampled grid
    prev: tuple[float, float]  # x_{t-1}, search-patch (row, col)
    origin: tuple[float, float]  # search position of grid point (0, 0)
    t: int = 0  # number of prior updates
    k: float = 0.5
    tau: float = 50.0
    sigma_prior: float = 64.0
    d_max: float = 32.0

    @property
    def weight(self) -> float:
        return time_weight(self.t, self.k, self.tau)

    def grid_position(self, index) -> tuple[float, float]:
        return (self.origin[0] + index[0], self.origin[1] + index[1])


def update_prior(state: TrackerState, position) -> TrackerState:
    """Running-average update of the prior with a Gaussian at ``position`` (search px)."""
    rows, cols = state.prior.shape
    gr, gc = position[0] - state.origin[0], position[1] - state.origin[1]
    if not (-0.5 <= gr <= rows - 0.5 and -0.5 <= gc <= cols - 0.5):
        raise UsageError(f"prior update at {position} outside the map grid")
    g = gaussian_map((rows, cols), (gr, gc), state.sigma_prior).values
    state.t += 1
    state.prior += (g - state.prior) / state.t
    return state


@dataclass
class TrackerConfig:
    template_size: int = 127
    search_size: int = 407
    k: float = 0.5
    tau: float = 50.0
    sigma_prior_px: float = 64.0
    d_max_px: float = 32.0
    regularize: bool = True

    def __post_init__(self):
        if not 0 < self.k <= 1:
            raise ConfigError(f"k must lie in (0, 1], got {self.k}")
        if self.tau <= 0 or self.sigma_prior_px <= 0 or self.d_max_px <= 0:
            raise ConfigError("tau, sigma_prior and d_max must be positive")
        if self.search_size < self.template_size:
            raise ConfigError("search size smaller than template size")


@dataclass
class FrameResult:
    frame: int
    xy: tuple[float, float]  # image pixels
    score: float
    latency_ms: float
    lost: bool = False


def prepare_frame(frame: np.ndarray) -> np.ndarray:
    """Standardize a frame with its own mean and std; crop fill becomes 0."""
    mean, std = data.frame_stats(frame)
    return data.standardize(frame, mean, std)


class Tracker:
    """Single-landmark tracker with a fixed frame-0 template."""

    def __init__(self, net: Network, config: TrackerConfig | None = None):
        keep_freed_memory()
        self.net = net
        self.config = config or TrackerConfig()
        self.state: TrackerState | None = None

    def start(self, frame: np.ndarray, landmark_xy) -> None:
        cfg = self.config
        norm = prepare_frame(frame)
        tpl = data.crop(norm, landmark_xy, cfg.template_size, fill_value=0.0)
        self.search_offset = data.window_offset(landmark_xy, cfg.search_size, frame.shape)
        self.template_emb = self.net.infer(as_batch(tpl.patch))[0]
        emb_size = self.net.output_size(cfg.search_size)
        self.template_fft = template_spectrum(self.template_emb, (emb_size, emb_size, self.net.out_channels))
        stride = self.net.total_stride
        # subpixel part of the annotation relative to the template's center pixel
        dx = landmark_xy[0] - (tpl.offset[0] + (cfg.template_size - 1) // 2)
        dy = landmark_xy[1] - (tpl.offset[1] + (cfg.template_size - 1) // 2)
        center = (cfg.template_size - 1) // 2
        self.map_offset = (center + dy, center + dx)
        self.stride = stride
        n = emb_size - self.template_emb.shape[0] + 1
        fine = (n - 1) * stride + 1
        self.state = TrackerState(
            prior=np.zeros((fine, fine)),
            prev=self.image_to_search(landmark_xy),
            origin=self.map_offset,
            k=cfg.k, tau=cfg.tau, sigma_prior=cfg.sigma_prior_px, d_max=cfg.d_max_px,
        )

    def image_to_search(self, xy) -> tuple[float, float]:
        return (xy[1] - self.search_offset[1], xy[0] - self.search_offset[0])

    def search_to_image(self, rc) -> tuple[float, float]:
        return (rc[1] + self.search_offset[0], rc[0] + self.search_offset[1])

    def similarity(self, frame: np.ndarray) -> SimilarityMap:
        norm = prepare_frame(frame)
        search = data.crop_at(norm, self.search_offset, self.config.search_size, fill_value=0.0)
        search_emb = self.net.infer(as_batch(search.patch))[0]
        scores = cross_correlate_fft(self.template_emb, search_emb, self.template_fft)
        return SimilarityMap(scores, self.stride, self.map_offset)

    def step(self, frame: np.ndarray, index: int) -> FrameResult:
        if self.state is None:
            raise UsageError("Tracker.step called before Tracker.start")
        t0 = time.perf_counter()
        state = self.state
        smap = self.similarity(frame)
        fine = upsample_bilinear(smap.values, self.stride)
        if self.config.regularize:
            fine = regularize(fine, state.prior, state.weight)
        idx = constrained_argmax(fine, state.prev, state.d_max, state.origin, 1.0)
        if idx is None:
            latency = (time.perf_counter() - t0) * 1e3
            return FrameResult(index, self.search_to_image(state.prev), float("nan"), latency, True)
        pos = state.grid_position(idx)
        if self.config.regularize:
            update_prior(state, pos)
        state.prev = pos
        latency = (time.perf_counter() - t0) * 1e3
        return FrameResult(index, self.search_to_image(pos), float(fine[idx]), latency)


@dataclass
class Trajectory:
    landmark: str
    spacing: tuple[float, float]
    results: list[FrameResult] = field(default_factory=list)

    def positions(self) -> dict[int, tuple[float, float]]:
        return {r.frame: r.xy for r in self.results}


def track_sequence(seq: data.Sequence, initial_xy, net: Network, config: TrackerConfig | None = None,
                   landmark: str = "lm0") -> Trajectory:
    """Track one landmark from its frame-0 position through the whole sequence."""
    if len(seq) < 2:
        raise UsageError(f"sequence {seq.id} has {len(seq)} frame(s); tracking needs at least 2")
    tracker = Tracker(net, config)
    tracker.start(seq.frames[0], initial_xy)
    traj = Trajectory(landmark, seq.spacing, [FrameResult(0, tuple(initial_xy), float("nan"), 0.0)])
    for i in range(1, len(seq)):
        traj.results.append(tracker.step(seq.frames[i], i))
    return traj


def write_trajectory(path, traj: Trajectory, record_latency: bool = True) -> None:
    sx, sy = traj.spacing
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        for r in traj.results:
            x, y = r.xy
            w.writerow([r.frame, repr(float(x)), repr(float(y)), repr(float(x) * sx), repr(float(y) * sy),
                        repr(r.score), repr(r.latency_ms if record_latency else 0.0), int(r.lost)])


def read_trajectory(path, landmark: str | None = None) -> Trajectory:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRAJECTORY_HEADER:
            raise DataError(f"{path}: expected header {','.join(TRAJECTORY_HEADER)}")
        results = []
        spacing = (1.0, 1.0)
        for rowno, row in enumerate(reader, 2):
            try:
                frame, x, y, xmm, ymm, score, lat, lost = row
                x, y = float(x), float(y)
                if x != 0 and y != 0:
                    spacing = (float(xmm) / x, float(ymm) / y)
                results.append(FrameResult(int(frame), (x, y), float(score), float(lat), bool(int(lost))))
            except ValueError as exc:
                raise DataError(f"{path}: row {rowno}: {exc}") from exc
    return Trajectory(landmark or path.stem, spacing, results)
