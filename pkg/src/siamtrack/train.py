"""Pair sampling and the Adam training loop for the embedding network."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data
from .errors import ConfigError, NumericalError
from .siamese import (
    binary_target,
    cross_correlate_backward,
    cross_correlate_fft,
    embedding_spectra,
    gaussian_map,
    l2_loss,
    logistic_loss_baseline,
)
from .tensor import checkpoint
from .tensor.adam import AdamState, adam_step
from .tensor.memory import keep_freed_memory
from .tensor.network import Network, load_profile

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    epochs: int = 100
    pairs_per_epoch: int = 512
    val_pairs: int = 64
    sigma_loss_mm: float = 2.16
    spacing_mm: float = 0.27
    sigma_loss_grid: str = "image"  # image: sigma in image px, divided by the stride; map: sigma in map px
    seed: int = 0
    checkpoint_every: int = 10
    loss: str = "l2"
    logistic_weighting: str = "none"
    logistic_radius_px: float = 16.0
    template_size: int = 127
    search_size: int = 223
    profile: str = "default"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.pairs_per_epoch < 1 or self.val_pairs < 1:
            raise ConfigError("pairs_per_epoch and val_pairs must be >= 1")
        if self.loss not in ("l2", "logistic"):
            raise ConfigError(f"unknown loss variant {self.loss!r}")
        if self.sigma_loss_grid not in ("image", "map"):
            raise ConfigError(f"sigma_loss_grid must be 'image' or 'map', got {self.sigma_loss_grid!r}")
        if self.search_size < self.template_size:
            raise ConfigError("search size smaller than template size")

    @property
    def sigma_loss_px(self) -> float:
        return self.sigma_loss_mm / self.spacing_mm


@dataclass
class Track:
    """One annotated landmark in one sequence, ready for pair sampling."""

    sequence: data.Sequence
    landmark: str
    frames: np.ndarray  # annotated frame indices
    xy: np.ndarray  # (len(frames), 2) image coordinates

    @property
    def initial_xy(self) -> tuple[float, float]:
        return float(self.xy[0, 0]), float(self.xy[0, 1])


@dataclass(frozen=True)
class Pair:
    track: int
    template: int  # row into Track.frames
    search: int


def build_tracks(items) -> list[Track]:
    """``items`` are (Sequence, list[Annotation]) per landmark; single-frame tracks are skipped."""
    tracks = []
    for seq, anns in items:
        anns = sorted(anns, key=lambda a: a.frame)
        if len(anns) < 2:
            lm = anns[0].landmark_id if anns else "?"
            log.warning("skipping landmark %s of %s: fewer than 2 annotated frames", lm, seq.id)
            continue
        frames = np.array([a.frame for a in anns])
        xy = np.array([[a.x, a.y] for a in anns], dtype=np.float64)
        tracks.append(Track(seq, anns[0].landmark_id, frames, xy))
    return tracks


def load_split(directory, spacing_mm: float = 0.27) -> list[Track]:
    """Every sequence directory under ``directory`` with its landmark CSVs."""
    items = []
    for seq_dir in sorted(p for p in Path(directory).iterdir() if p.is_dir()):
        seq = data.load_sequence(seq_dir)
        anns = [data.load_annotations(f, seq) for f in data.landmark_files(seq_dir)]
        for lm in anns:
            seq_r, lm_r = data.resample(seq, spacing_mm, lm)
            items.append((seq_r, lm_r))
    return build_tracks(items)


def sample_pairs(tracks: list[Track], seed: int):
    """Endless deterministic stream of ordered (template, search) frame pairs.

    A track is picked uniformly, then an ordered pair of distinct annotated
    frames is picked uniformly within it.
    """
    if not tracks:
        raise ConfigError("no trainable landmark tracks")
    rng = np.random.default_rng(seed)
    while True:
        k = int(rng.integers(len(tracks)))
        n = len(tracks[k].frames)
        i = int(rng.integers(n))
        j = int(rng.integers(n - 1))
        if j >= i:
            j += 1
        yield Pair(k, i, j)


def take(stream, n: int) -> list[Pair]:
    return [next(stream) for _ in range(n)]


@dataclass
class Batch:
    templates: np.ndarray  # (N, t, t, 1)
    searches: np.ndarray  # (N, s, s, 1)
    centers: np.ndarray  # (N, 2) ground truth (row, col) on the similarity map


def _centered(xy, size: int) -> tuple[int, int]:
    half = (size - 1) // 2
    return data.nearest_pixel(xy[0]) - half, data.nearest_pixel(xy[1]) - half


class PairCropper:
    """Cuts template/search patches for pairs; caches standardized frames."""

    def __init__(self, tracks: list[Track], template_size: int, search_size: int, stride: int):
        self.tracks = tracks
        self.template_size = template_size
        self.search_size = search_size
        self.stride = stride
        self._stats: dict[tuple[int, int], tuple[float, float]] = {}

    def stats(self, track: int, frame: int) -> tuple[float, float]:
        seq = self.tracks[track].sequence
        key = (id(seq), frame)
        if key not in self._stats:
            self._stats[key] = data.frame_stats(seq.frames[frame])
        return self._stats[key]

    def _patch(self, track: int, frame: int, offset, size: int) -> np.ndarray:
        # crop raw, pad with the frame mean, then standardize: same as standardize-then-crop
        mean, std = self.stats(track, frame)
        raw = self.tracks[track].sequence.frames[frame]
        return data.standardize(data.crop_at(raw, offset, size, fill_value=mean).patch, mean, std)

    def __call__(self, pairs: list[Pair]) -> Batch:
        n = len(pairs)
        ts, ss = self.template_size, self.search_size
        templates = np.empty((n, ts, ts, 1), dtype=np.float32)
        searches = np.empty((n, ss, ss, 1), dtype=np.float32)
        centers = np.empty((n, 2))
        center = (ts - 1) // 2
        for b, p in enumerate(pairs):
            tr = self.tracks[p.track]
            txy = tr.xy[p.template]
            sxy = tr.xy[p.search]
            tf, sf = int(tr.frames[p.template]), int(tr.frames[p.search])
            toff = _centered(txy, ts)
            soff = _centered(tr.initial_xy, ss)  # centered, padded past the image edge
            templates[b, :, :, 0] = self._patch(p.track, tf, toff, ts)
            searches[b, :, :, 0] = self._patch(p.track, sf, soff, ss)
            # map index (0, 0) sits at search pixel center + subpixel template offset
            dx = txy[0] - (toff[0] + center)
            dy = txy[1] - (toff[1] + center)
            gx = sxy[0] - soff[0]
            gy = sxy[1] - soff[1]
            centers[b] = ((gy - center - dy) / self.stride, (gx - center - dx) / self.stride)
        return Batch(templates, searches, centers)


class Trainer:
    """Holds the network, optimizer state and loss definition."""

    def __init__(self, net: Network, config: TrainConfig):
        self.net = net
        self.config = config
        self.adam = AdamState()
        stride = net.total_stride
        sigma = config.sigma_loss_px
        self.sigma_map = sigma / stride if config.sigma_loss_grid == "image" else sigma
        self.map_size = net.output_size(config.search_size) - net.output_size(config.template_size) + 1

    def targets(self, centers: np.ndarray) -> np.ndarray:
        shape = (self.map_size, self.map_size)
        if self.config.loss == "l2":
            return np.stack([gaussian_map(shape, c, self.sigma_map).values for c in centers])
        radius = self.config.logistic_radius_px / self.net.total_stride
        return np.stack([binary_target(shape, c, radius) for c in centers])

    def loss_and_grad_scores(self, scores: np.ndarray, targets: np.ndarray):
        n = scores.shape[0]
        if self.config.loss == "l2":
            loss, grad = l2_loss(scores, targets.astype(scores.dtype))
            return loss / n, grad / n
        total, grads = 0.0, np.empty_like(scores)
        for b in range(n):
            lb, grads[b] = logistic_loss_baseline(scores[b], targets[b], self.config.logistic_weighting)
            total += lb
        return total / n, grads / n

    def forward_loss(self, batch: Batch, train: bool):
        et, trace_t = self.net.forward(batch.templates, train=train)
        es, trace_s = self.net.forward(batch.searches, train=train)
        spectra = embedding_spectra(et, es)
        scores = cross_correlate_fft(et, es, spectra=spectra)
        loss, dscores = self.loss_and_grad_scores(scores, self.targets(batch.centers))
        return loss, (et, es, trace_t, trace_s, dscores, spectra)

    def gradients(self, batch: Batch):
        loss, (et, es, trace_t, trace_s, dscores, spectra) = self.forward_loss(batch, train=True)
        if not math.isfinite(loss):
            return loss, None
        dt, ds = cross_correlate_backward(dscores, et, es, spectra)
        _, gt = self.net.backward(dt, trace_t)
        _, gs = self.net.backward(ds, trace_s)
        grads = [{k: gt[i][k] + gs[i][k] for k in gt[i]} for i in range(len(gt))]
        return loss, grads

    def step(self, batch: Batch, index: int = 0) -> float:
        loss, grads = self.gradients(batch)
        if grads is None:
            raise NumericalError(f"non-finite training loss at batch {index}")
        if self.config.lr > 0:
            adam_step(self.net.parameters(), self.net.flat_grads(grads), self.adam, self.config.lr)
        return loss

    def evaluate(self, batches) -> float:
        losses = [self.forward_loss(b, train=False)[0] for b in batches]
        return float(np.mean(losses))


@dataclass
class TrainResult:
    curve: list[tuple[int, float, float]]
    initial_val_loss: float
    best_val_loss: float
    best_epoch: int
    seconds: float
    net: Network
    best_net: Network = field(repr=False, default=None)


def write_loss_curve(path, curve) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tl, vl in curve:
            w.writerow([epoch, repr(float(tl)), repr(float(vl))])


def read_loss_curve(path) -> list[tuple[int, float, float]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [(int(e), float(t), float(v)) for e, t, v in rows]


def train(config: TrainConfig, train_tracks: list[Track], val_tracks: list[Track], out_dir=None,
          net: Network | None = None, metadata: dict | None = None) -> TrainResult:
    """Adam training with per-epoch validation and best-checkpoint retention."""
    start = time.perf_counter()
    keep_freed_memory()
    if net is None:
        net = Network(load_profile(config.profile), seed=config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(net, config)
    stride = net.total_stride
    crop_train = PairCropper(train_tracks, config.template_size, config.search_size, stride)
    crop_val = PairCropper(val_tracks or train_tracks, config.template_size, config.search_size, stride)
    val_pairs = take(sample_pairs(crop_val.tracks, config.seed + 1), config.val_pairs)
    bs = config.batch_size
    val_batches = [crop_val(val_pairs[i:i + bs]) for i in range(0, len(val_pairs), bs)]
    stream = sample_pairs(train_tracks, config.seed)

    initial = trainer.evaluate(val_batches)
    log.info("initial validation loss %.6g", initial)
    meta = dict(metadata or {})
    best, best_epoch, best_net = math.inf, 0, net.copy()
    curve = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        pairs = take(stream, config.pairs_per_epoch)
        losses = []
        for i in range(0, len(pairs), bs):
            losses.append(trainer.step(crop_train(pairs[i:i + bs]), step))
            step += 1
        val = trainer.evaluate(val_batches)
        if not math.isfinite(val):
            raise NumericalError(f"non-finite validation loss after epoch {epoch}")
        curve.append((epoch, float(np.mean(losses)), val))
        log.info("epoch %d train %.6g val %.6g", epoch, curve[-1][1], val)
        if val < best:
            best, best_epoch, best_net = val, epoch, net.copy()
            if out is not None:
                checkpoint.save(out / "best.ckpt", best_net, {**meta, "epoch": epoch, "val_loss": repr(val)})
        if out is not None:
            write_loss_curve(out / "loss_curve.csv", curve)
            if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                checkpoint.save(out / "last.ckpt", net, {**meta, "epoch": epoch, "val_loss": repr(val)})
    seconds = time.perf_counter() - start
    if out is not None:
        (out / "summary.txt").write_text(
            f"initial_val_loss={initial!r}\nbest_val_loss={best!r}\nbest_epoch={best_epoch}\n"
            f"epochs={config.epochs}\nseconds={seconds:.1f}\n")
    return TrainResult(curve, initial, best, best_epoch, seconds, net, best_net)
