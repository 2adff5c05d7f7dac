"""Deterministic ultrasound-like sequences with analytic landmark trajectories.

A scene is a smooth echogenicity background plus rendered structures (bright
blobs, dark vessel ellipses with a bright wall), multiplied by speckle. Each
structure follows ``base + A sin(2 pi t / P + phase) + drift t``; structures
flagged as landmarks get a ground-truth CSV in the data-io layout.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import data
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

SPECKLE_GRAIN = 1.5  # px, smoothing of the complex scatterer field
GAIN = 60.0


@dataclass
class Structure:
    name: str
    shape: str = "blob"  # blob | vessel
    x: float = 128.0  # base position, px
    y: float = 128.0
    radius: float = 8.0  # px; semi-major axis for vessels
    aspect: float = 1.0  # minor/major axis ratio
    angle: float = 0.0  # radians
    contrast: float = 1.0
    amp_x_mm: float = 0.0
    amp_y_mm: float = 0.0
    period: float = 50.0  # frames
    phase: float = 0.0
    drift_x: float = 0.0  # px/frame
    drift_y: float = 0.0
    landmark: bool = False
    twin_of: str = ""


@dataclass
class SceneSpec:
    width: int = 256
    height: int = 256
    spacing: float = 0.27
    n_frames: int = 200
    fps: float = 20.0
    seed: int = 0
    speckle: float = 0.5  # weight of the speckle texture in the multiplicative field
    noise: float = 0.4  # fraction of speckle power decorrelating each frame
    background: float = 0.25  # amplitude of the smooth background variation
    d_max_px: float = 32.0
    name: str = "scene"
    adversarial: bool = False
    structures: list[Structure] = field(default_factory=list)

    def landmarks(self) -> list[Structure]:
        return [s for s in self.structures if s.landmark]


def trajectory(s: Structure, n_frames: int, spacing: float) -> np.ndarray:
    """(T, 2) array of (x, y) positions in pixels."""
    t = np.arange(n_frames, dtype=np.float64)
    wave = np.sin(2.0 * np.pi * t / s.period + s.phase)
    x = s.x + (s.amp_x_mm / spacing) * wave + s.drift_x * t
    y = s.y + (s.amp_y_mm / spacing) * wave + s.drift_y * t
    return np.stack([x, y], axis=1)


def validate(spec: SceneSpec) -> None:
    if spec.width < 1 or spec.height < 1 or spec.n_frames < 1 or spec.spacing <= 0:
        raise ConfigError(f"invalid scene geometry in {spec.name}")
    names = [s.name for s in spec.structures]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate structure names in {spec.name}: {names}")
    for s in spec.structures:
        if s.shape not in ("blob", "vessel"):
            raise ConfigError(f"structure {s.name}: unknown shape {s.shape!r}")
        if s.period <= 0 or s.radius <= 0:
            raise ConfigError(f"structure {s.name}: period and radius must be positive")
        traj = trajectory(s, spec.n_frames, spec.spacing)
        if (traj[:, 0].min() < 0 or traj[:, 0].max() > spec.width - 1
                or traj[:, 1].min() < 0 or traj[:, 1].max() > spec.height - 1):
            raise DataError(f"structure {s.name} leaves the {spec.width}x{spec.height} image")
        if spec.n_frames > 1:
            step = np.linalg.norm(np.diff(traj, axis=0), axis=1).max()
            if step >= spec.d_max_px:
                log.warning("structure %s moves %.1f px in one frame (d_max %.1f px)", s.name, step, spec.d_max_px)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _render_structures(spec: SceneSpec, positions: dict, base: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    echo = base.copy()
    edge = 1.2
    for s in spec.structures:
        px, py = positions[s.name]
        dx, dy = xx - px, yy - py
        ca, sa = math.cos(s.angle), math.sin(s.angle)
        u = (dx * ca + dy * sa) / s.radius
        v = (-dx * sa + dy * ca) / (s.radius * s.aspect)
        rho = np.sqrt(u * u + v * v) * s.radius  # px-scaled elliptical radius
        if s.shape == "blob":
            echo = echo + s.contrast * _sigmoid((s.radius - rho) / edge)
        else:
            lumen = _sigmoid((0.55 * s.radius - rho) / edge)
            wall = _sigmoid((s.radius - rho) / edge) - lumen
            echo = echo * (1.0 - 0.85 * lumen) + s.contrast * wall
    return echo


def _complex_field(rng, shape, sigma):
    re = gaussian_filter(rng.standard_normal(shape), sigma)
    im = gaussian_filter(rng.standard_normal(shape), sigma)
    return re + 1j * im


def _background(spec: SceneSpec, rng) -> np.ndarray:
    smooth = gaussian_filter(rng.standard_normal((spec.height, spec.width)), 16.0)
    return np.clip(1.0 + spec.background * smooth / smooth.std(), 0.3, None)


def render_clean(spec: SceneSpec, t: int) -> np.ndarray:
    """Frame ``t`` before speckle and quantization: background plus structures."""
    validate(spec)
    base = _background(spec, np.random.default_rng(spec.seed))
    trajs = {s.name: trajectory(s, spec.n_frames, spec.spacing) for s in spec.structures}
    return GAIN * _render_structures(spec, {k: v[t] for k, v in trajs.items()}, base)


def generate(spec: SceneSpec):
    """Render a scene. Returns ``(sequence, {landmark_name: [Annotation, ...]})``."""
    validate(spec)
    rng = np.random.default_rng(spec.seed)
    shape = (spec.height, spec.width)
    base = _background(spec, rng)
    static = _complex_field(rng, shape, SPECKLE_GRAIN)
    # speckle amplitude normalized by the field RMS so every frame has the same statistics
    rms = math.sqrt(np.mean(np.abs(static) ** 2))
    rho = math.sqrt(1.0 - spec.noise)
    trajs = {s.name: trajectory(s, spec.n_frames, spec.spacing) for s in spec.structures}
    frames = np.empty((spec.n_frames,) + shape, dtype=np.uint8)
    for t in range(spec.n_frames):
        echo = _render_structures(spec, {k: v[t] for k, v in trajs.items()}, base)
        z = rho * static + math.sqrt(spec.noise) * _complex_field(rng, shape, SPECKLE_GRAIN)
        rayleigh = np.abs(z) / rms * (2.0 / math.sqrt(math.pi))  # unit-mean Rayleigh
        texture = (1.0 - spec.speckle) + spec.speckle * rayleigh
        frames[t] = np.clip(np.rint(GAIN * echo * texture), 0, 255).astype(np.uint8)
    seq = data.Sequence(frames, (spec.spacing, spec.spacing), spec.fps, spec.name,
                        {"synthetic": "1", "adversarial": str(int(spec.adversarial))})
    truth = {
        s.name: [data.Annotation(spec.name, s.name, t, float(x), float(y))
                 for t, (x, y) in enumerate(trajs[s.name])]
        for s in spec.landmarks()
    }
    return seq, truth


# -- serialization -----------------------------------------------------------

_SCENE_FIELDS = [f for f in fields(SceneSpec) if f.name != "structures"]
_STRUCT_FIELDS = list(fields(Structure))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(kind, text: str):
    if kind in (bool, "bool"):
        return text.strip() in ("1", "true", "True")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text


def spec_to_dict(spec: SceneSpec) -> dict:
    out = {f"scene.{f.name}": _fmt(getattr(spec, f.name)) for f in _SCENE_FIELDS}
    for i, s in enumerate(spec.structures):
        out.update({f"structure.{i}.{k}": _fmt(v) for k, v in asdict(s).items()})
    return out


def spec_from_dict(values: dict) -> SceneSpec:
    kw = {}
    for f in _SCENE_FIELDS:
        key = f"scene.{f.name}"
        if key in values:
            kw[f.name] = _parse(f.type, values[key])
    structs: dict[int, dict] = {}
    for key, value in values.items():
        if key.startswith("structure."):
            _, idx, name = key.split(".", 2)
            structs.setdefault(int(idx), {})[name] = value
    kw["structures"] = [
        Structure(**{f.name: _parse(f.type, d[f.name]) for f in _STRUCT_FIELDS if f.name in d})
        for _, d in sorted(structs.items())
    ]
    return SceneSpec(**kw)


def save_spec(spec: SceneSpec, path) -> None:
    data.write_keyvalue(path, spec_to_dict(spec))


def load_spec(path) -> SceneSpec:
    return spec_from_dict(data.read_keyvalue(path))


def write_scene(spec: SceneSpec, directory) -> Path:
    """Generate ``spec`` and write frames, meta.txt, scene.txt and landmark CSVs."""
    directory = Path(directory)
    seq, truth = generate(spec)
    data.save_sequence(seq, directory)
    save_spec(spec, directory / "scene.txt")
    for name, annotations in truth.items():
        data.write_annotations(directory / f"landmark_{name}.csv", annotations)
    return directory


# -- canned scenes -----------------------------------------------------------

def random_scene(rng: np.random.Generator, name: str, n_frames: int = 200, size: int = 256,
                 spacing: float = 0.27) -> SceneSpec:
    """A landmark with respiratory-like motion among unrelated clutter."""
    seed = int(rng.integers(2**31))
    amp = rng.uniform(2.0, 5.0)  # mm
    direction = rng.uniform(0, 2 * np.pi)
    amp_x, amp_y = amp * math.cos(direction), amp * math.sin(direction)
    margin = 40 + amp / spacing
    shape = "blob" if rng.random() < 0.5 else "vessel"
    target = Structure(
        "lm0", shape,
        x=float(rng.uniform(margin, size - 1 - margin)), y=float(rng.uniform(margin, size - 1 - margin)),
        radius=float(rng.uniform(9.0, 14.0)), aspect=float(rng.uniform(0.6, 1.0)),
        angle=float(rng.uniform(0, np.pi)), contrast=float(rng.uniform(1.5, 2.5)),
        amp_x_mm=amp_x, amp_y_mm=amp_y, period=float(rng.uniform(30, 70)),
        phase=float(rng.uniform(0, 2 * np.pi)), landmark=True,
    )
    structures = [target]
    for k in range(int(rng.integers(3, 7))):
        # clutter keeps clear of the landmark path and looks different from it
        for _ in range(100):
            cx, cy = rng.uniform(15, size - 16, 2)
            if math.hypot(cx - target.x, cy - target.y) > 45 + amp / spacing:
                break
        structures.append(Structure(
            f"c{k}", "vessel" if rng.random() < 0.5 else "blob",
            x=float(cx), y=float(cy), radius=float(rng.uniform(4.0, 16.0)),
            aspect=float(rng.uniform(0.3, 1.0)), angle=float(rng.uniform(0, np.pi)),
            contrast=float(rng.uniform(0.5, 2.0)),
            amp_x_mm=amp_x * 0.5, amp_y_mm=amp_y * 0.5, period=target.period, phase=target.phase,
        ))
    return SceneSpec(width=size, height=size, spacing=spacing, n_frames=n_frames, seed=seed,
                     name=name, structures=structures)


# The twin is marginally brighter than the target: enough to win an unconstrained
# argmax, not enough to beat the prior penalty inside the d_max disk (5-6% near
# closest approach). Tuned against the default 100-epoch network.
TWIN_GAIN = 1.065


def adversarial_twin_spec(seed: int = 7, variant: int = 0, n_frames: int = 200) -> SceneSpec:
    """A landmark whose look-alike twin sweeps up to it, pauses, and leaves.

    The twin turns around 24 px below the landmark near frame 100, once the
    temporal prior is established, then travels diagonally to about 173 px
    (over 5 d_max) away. The diagonal matters: the fixed search window only
    reaches about 140 px from the initial position along each axis.
    Speckle and background texture are off so that the only cue separating
    the two structures is where they are. ``variant`` 1 mirrors the geometry.
    """
    size = 256
    sign = 1.0 if variant == 0 else -1.0
    mid = (size - 1) / 2.0
    tx, ty = mid - sign * 80.0, 100.0
    target = Structure("lm0", "blob", x=tx, y=ty, radius=9.0, aspect=0.8, angle=0.4, contrast=1.5,
                       amp_x_mm=0.0, amp_y_mm=0.5, period=60.0, landmark=True)
    closest, period, amp_px, below = 100.0, 160.0, 55.0, 24.0
    # sin(...) = -1 at t = closest puts the twin's turning point right below the target
    phase = 1.5 * np.pi - 2.0 * np.pi * closest / period
    twin = Structure("twin", "blob", x=tx + sign * amp_px, y=ty + below + amp_px, radius=9.0, aspect=0.8,
                     angle=0.4, contrast=1.5 * TWIN_GAIN, amp_x_mm=sign * amp_px * 0.27,
                     amp_y_mm=amp_px * 0.27, period=period, phase=float(phase), twin_of="lm0")
    clutter = [
        Structure("c0", "vessel", x=tx, y=215.0, radius=14.0, aspect=0.5, angle=0.2, contrast=0.8),
        Structure("c1", "vessel", x=mid + sign * 40.0, y=35.0, radius=10.0, aspect=0.7, angle=1.2, contrast=0.6),
    ]
    return SceneSpec(n_frames=n_frames, seed=seed, name=f"twin{variant}", adversarial=True,
                     speckle=0.0, noise=0.0, background=0.0, structures=[target, twin] + clutter)


def default_suite(seed: int = 2024, n_frames: int = 200):
    """{split: [SceneSpec]}: 12 train, 4 val, 6 test (the last 2 adversarial twins)."""
    rng = np.random.default_rng(seed)
    suite = {"train": [], "val": [], "test": []}
    for split, count in (("train", 12), ("val", 4), ("test", 4)):
        for i in range(count):
            suite[split].append(random_scene(rng, f"{split}{i:02d}", n_frames))
    suite["test"] += [adversarial_twin_spec(seed + 1, 0, n_frames), adversarial_twin_spec(seed + 2, 1, n_frames)]
    return suite


def write_suite(out_dir, seed: int = 2024, n_frames: int = 200, splits=("train", "val", "test")):
    out_dir = Path(out_dir)
    suite = default_suite(seed, n_frames)
    written = {}
    for split in splits:
        written[split] = [write_scene(spec, out_dir / split / spec.name) for spec in suite[split]]
    return written


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized cross-correlation of two equally sized patches."""
    a = np.asarray(a, np.float64) - np.mean(a)
    b = np.asarray(b, np.float64) - np.mean(b)
    denom = math.sqrt(float(np.sum(a * a) * np.sum(b * b)))
    return float(np.sum(a * b) / denom) if denom > 0 else 0.0


def twin_similarity(spec: SceneSpec, radius: int = 12) -> float:
    """NCC of the noise-free target and twin patches at their closest approach."""
    twin = next(s for s in spec.structures if s.twin_of)
    t, _ = closest_approach(spec, twin.twin_of, twin.name)
    frame = render_clean(spec, t)
    by_name = {s.name: s for s in spec.structures}
    size = 2 * radius + 1
    patches = []
    for name in (twin.twin_of, twin.name):
        xy = trajectory(by_name[name], spec.n_frames, spec.spacing)[t]
        patches.append(data.crop(frame, xy, size).patch)
    return ncc(*patches)


def closest_approach(spec: SceneSpec, a: str, b: str) -> tuple[int, float]:
    """(frame, distance in px) where structures ``a`` and ``b`` are nearest."""
    by_name = {s.name: s for s in spec.structures}
    ta = trajectory(by_name[a], spec.n_frames, spec.spacing)
    tb = trajectory(by_name[b], spec.n_frames, spec.spacing)
    d = np.linalg.norm(ta - tb, axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])
