"""Sequence and annotation I/O, physical-unit resampling and patch cropping.

On-disk layout of one sequence directory::

    frame_00000.pgm, frame_00001.pgm, ...   binary PGM (P5), 8- or 16-bit
    meta.txt                                key=value: spacing_mm_per_px, fps, id
    landmark_<id>.csv                       header ``frame,x,y``; x/y are 0-indexed
                                            image pixel coordinates (column, row)

Image-space positions are (x, y) throughout this module.
"""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, UsageError

FRAME_PATTERN = "frame_{:05d}.pgm"
_FRAME_RE = re.compile(r"^frame_(\d{5})\.pgm$")


@dataclass
class Sequence:
    frames: np.ndarray  # (T, H, W)
    spacing: tuple[float, float]  # mm/px along (x, y)
    fps: float = 20.0
    id: str = "seq"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.ndim != 3:
            raise DataError(f"sequence {self.id}: frames must be (T, H, W), got {self.frames.shape}")
        if isinstance(self.spacing, (int, float)):
            self.spacing = (float(self.spacing), float(self.spacing))
        if min(self.spacing) <= 0:
            raise DataError(f"sequence {self.id}: spacing must be positive, got {self.spacing}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    @property
    def isotropic_spacing(self) -> float:
        sx, sy = self.spacing
        if not math.isclose(sx, sy, rel_tol=1e-9):
            raise UsageError(f"sequence {self.id} has anisotropic spacing {self.spacing}; resample first")
        return sx


@dataclass(frozen=True)
class Annotation:
    sequence_id: str
    landmark_id: str
    frame: int
    x: float
    y: float

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


# -- PGM ---------------------------------------------------------------------

def _pgm_tokens(data: bytes, count: int):
    """First ``count`` whitespace-separated header tokens (comments skipped) and the
    offset of the single whitespace byte that ends the header."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos


def decode_pgm(data: bytes) -> np.ndarray:
    tokens, pos = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise DataError(f"unsupported PGM magic {tokens[0]!r} (need binary P5)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError(f"malformed PGM header: {exc}") from exc
    if not 0 < maxval < 65536 or width <= 0 or height <= 0:
        raise DataError(f"invalid PGM header values {width}x{height} maxval={maxval}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    pos += 1
    nbytes = width * height * dtype.itemsize
    if len(data) - pos < nbytes:
        raise DataError(f"PGM pixel data truncated: {len(data) - pos} of {nbytes} bytes")
    img = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos).reshape(height, width)
    return img.astype(np.uint8 if maxval < 256 else np.uint16)


def encode_pgm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2:
        raise UsageError(f"PGM images are 2-d, got shape {image.shape}")
    if image.dtype == np.uint8:
        maxval, raw = 255, image.tobytes()
    elif image.dtype == np.uint16:
        maxval, raw = 65535, image.astype(">u2").tobytes()
    else:
        raise UsageError(f"PGM needs uint8 or uint16 pixels, got {image.dtype}")
    h, w = image.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + raw


def read_pgm(path) -> np.ndarray:
    try:
        return decode_pgm(Path(path).read_bytes())
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_pgm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(image))


# -- sequences ---------------------------------------------------------------

def read_keyvalue(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def write_keyvalue(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in values.items()))


def _parse_spacing(text: str) -> tuple[float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) == 2:
        return parts[0], parts[1]
    raise DataError(f"spacing_mm_per_px must be 'sx' or 'sx,sy', got {text!r}")


def load_sequence(directory) -> Sequence:
    directory = Path(directory)
    meta_path = directory / "meta.txt"
    if not meta_path.exists():
        raise DataError(f"{directory}: missing meta.txt")
    meta = read_keyvalue(meta_path)
    if "spacing_mm_per_px" not in meta:
        raise DataError(f"{meta_path}: missing spacing_mm_per_px")
    try:
        spacing = _parse_spacing(meta["spacing_mm_per_px"])
        fps = float(meta.get("fps", "20"))
    except ValueError as exc:
        raise DataError(f"{meta_path}: {exc}") from exc
    indices = sorted(int(m.group(1)) for p in directory.iterdir() if (m := _FRAME_RE.match(p.name)))
    if not indices:
        raise DataError(f"{directory}: no frame_NNNNN.pgm files")
    missing = sorted(set(range(indices[-1] + 1)) - set(indices))
    if missing:
        raise DataError(f"{directory}: missing frames {missing[:10]}")
    frames = [read_pgm(directory / FRAME_PATTERN.format(i)) for i in indices]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise DataError(f"{directory}: inconsistent frame shapes {sorted(shapes)}")
    return Sequence(np.stack(frames), spacing, fps, meta.get("id", directory.name), meta)


def save_sequence(seq: Sequence, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        write_pgm(directory / FRAME_PATTERN.format(i), frame)
    sx, sy = seq.spacing
    spacing = repr(sx) if sx == sy else f"{sx!r},{sy!r}"
    meta = {"id": seq.id, "spacing_mm_per_px": spacing, "fps": repr(float(seq.fps))}
    meta.update({k: v for k, v in seq.meta.items() if k not in meta and k != "spacing_mm_per_px"})
    write_keyvalue(directory / "meta.txt", meta)


def landmark_files(directory) -> list[Path]:
    return sorted(Path(directory).glob("landmark_*.csv"))


def load_annotations(path, sequence: Sequence | None = None, sequence_id: str | None = None) -> list[Annotation]:
    """Read a ``frame,x,y`` CSV. With ``sequence`` given, rows are validated
    against its length and image bounds."""
    path = Path(path)
    landmark = path.stem.removeprefix("landmark_")
    seq_id = sequence_id or (sequence.id if sequence is not None else path.parent.name)
    out = []
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot read annotations {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["frame", "x", "y"]:
            raise DataError(f"{path}: expected header 'frame,x,y', got {header}")
        for rowno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                frame, x, y = int(row[0]), float(row[1]), float(row[2])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: row {rowno}: malformed {row}") from exc
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DataError(f"{path}: row {rowno}: non-finite coordinate")
            if sequence is not None:
                h, w = sequence.shape
                if not 0 <= frame < len(sequence):
                    raise DataError(f"{path}: row {rowno}: frame {frame} outside sequence of length {len(sequence)}")
                if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
                    raise DataError(f"{path}: row {rowno}: position ({x}, {y}) outside {w}x{h} image")
            out.append(Annotation(seq_id, landmark, frame, x, y))
    return out


def write_annotations(path, annotations) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "x", "y"])
        for a in annotations:
            w.writerow([a.frame, repr(float(a.x)), repr(float(a.y))])


# -- resampling --------------------------------------------------------------

def _axis_weights(n_out: int, n_in: int, scale: float):
    """Source index pairs and weights for sampling at src = dst / scale, edge-clamped."""
    src = np.arange(n_out, dtype=np.float64) / scale
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resample_image(image: np.ndarray, scale_x: float, scale_y: float, out_shape=None) -> np.ndarray:
    """Bilinear resampling where output pixel (r, c) samples input (r/scale_y, c/scale_x)."""
    h, w = image.shape
    if out_shape is None:
        out_shape = (max(1, round(h * scale_y)), max(1, round(w * scale_x)))
    r0, r1, fr = _axis_weights(out_shape[0], h, scale_y)
    c0, c1, fc = _axis_weights(out_shape[1], w, scale_x)
    img = image.astype(np.float64)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def resample(seq: Sequence, target_spacing: float, annotations=None, min_extent: int = 127):
    """Resample to isotropic ``target_spacing`` mm/px.

    Returns the new sequence, plus scaled annotations when ``annotations`` is given.
    """
    if not target_spacing > 0:
        raise ConfigError(f"target spacing must be positive, got {target_spacing}")
    sx, sy = seq.spacing
    if sx == target_spacing and sy == target_spacing:
        out = seq
        scaled = list(annotations) if annotations is not None else None
    else:
        kx, ky = sx / target_spacing, sy / target_spacing
        h, w = seq.shape
        shape = (max(1, round(h * ky)), max(1, round(w * kx)))
        if min(shape) < min_extent:
            raise ConfigError(f"resampled extent {shape} smaller than {min_extent} px")
        frames = np.stack([resample_image(f, kx, ky, shape) for f in seq.frames]).astype(np.float32)
        out = replace(seq, frames=frames, spacing=(target_spacing, target_spacing), meta=dict(seq.meta))
        scaled = None if annotations is None else [replace(a, x=a.x * kx, y=a.y * ky) for a in annotations]
    return out if annotations is None else (out, scaled)


# -- cropping ----------------------------------------------------------------

@dataclass
class Crop:
    """A square patch and its placement: ``image_xy = patch_xy + offset``."""

    patch: np.ndarray
    offset: tuple[int, int]  # (x0, y0) of patch pixel (0, 0) in the image
    fill_fraction: float
    fill_value: float

    def to_image(self, xy):
        return (xy[0] + self.offset[0], xy[1] + self.offset[1])

    def to_patch(self, xy):
        return (xy[0] - self.offset[0], xy[1] - self.offset[1])


def nearest_pixel(v: float) -> int:
    return int(math.floor(v + 0.5))


def crop(frame: np.ndarray, center_xy, size: int, fill_value: float | None = None) -> Crop:
    """``size`` x ``size`` patch centered on the pixel nearest ``center_xy``.

    Area outside the image is filled with ``fill_value`` (default: frame mean).
    """
    h, w = frame.shape
    cx, cy = center_xy
    if not (-0.5 <= cx < w - 0.5 and -0.5 <= cy < h - 0.5):
        raise UsageError(f"crop center ({cx}, {cy}) outside {w}x{h} image")
    if size < 1:
        raise ConfigError(f"crop size must be positive, got {size}")
    half = (size - 1) // 2
    return crop_at(frame, (nearest_pixel(cx) - half, nearest_pixel(cy) - half), size, fill_value)


def crop_at(frame: np.ndarray, offset, size: int, fill_value: float | None = None) -> Crop:
    """``size`` x ``size`` patch whose pixel (0, 0) is image pixel ``offset`` = (x0, y0)."""
    h, w = frame.shape
    if size < 1:
        raise ConfigError(f"crop size must be positive, got {size}")
    x0, y0 = int(offset[0]), int(offset[1])
    fill = float(frame.mean()) if fill_value is None else float(fill_value)
    out = np.full((size, size), fill, dtype=np.float32)
    ys0, ys1 = max(0, y0), min(h, y0 + size)
    xs0, xs1 = max(0, x0), min(w, x0 + size)
    if ys1 > ys0 and xs1 > xs0:
        out[ys0 - y0:ys1 - y0, xs0 - x0:xs1 - x0] = frame[ys0:ys1, xs0:xs1]
    inside = max(0, ys1 - ys0) * max(0, xs1 - xs0)
    return Crop(out, (x0, y0), 1.0 - inside / (size * size), fill)


def window_offset(center_xy, size: int, image_shape) -> tuple[int, int]:
    """Top-left (x0, y0) of a ``size`` window centered on ``center_xy``.

    Along an axis where the image is at least ``size`` long the window is
    shifted to lie inside the image; along a shorter axis it stays centered
    and the crop pads the excess.
    """
    h, w = image_shape[:2]
    half = (size - 1) // 2
    x0 = nearest_pixel(center_xy[0]) - half
    y0 = nearest_pixel(center_xy[1]) - half
    if w >= size:
        x0 = min(max(x0, 0), w - size)
    if h >= size:
        y0 = min(max(y0, 0), h - size)
    return x0, y0


def crop_template(frame: np.ndarray, center_xy, size: int = 127) -> Crop:
    return crop(frame, center_xy, size)


def crop_search(frame: np.ndarray, initial_center_xy, size: int = 407, fill_value: float | None = None) -> Crop:
    """Search window around the initial landmark, clamped into the image where it fits."""
    return crop_at(frame, window_offset(initial_center_xy, size, frame.shape), size, fill_value)


def standardize(patch: np.ndarray, mean: float, std: float) -> np.ndarray:
    """Zero-mean, unit-variance scaling using frame statistics (fill becomes 0)."""
    return ((patch - mean) / (std if std > 0 else 1.0)).astype(np.float32)


def frame_stats(frame: np.ndarray) -> tuple[float, float]:
    f = frame.astype(np.float64)
    return float(f.mean()), float(f.std())
