"""Siamese similarity head: shared embedding, cross-correlation, targets and losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import next_fast_len

from .errors import ConfigError
from .tensor.network import Network, Trace


@dataclass
class GaussianMap:
    values: np.ndarray
    center: tuple[float, float]  # (row, col)
    sigma: float


@dataclass
class SimilarityMap:
    """Score grid plus the affine map from grid indices to search-patch pixels.

    ``pixel = offset + stride * index`` per axis, with (row, col) ordering.
    """

    values: np.ndarray
    stride: float
    offset: tuple[float, float]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def to_pixel(self, index):
        index = np.asarray(index, dtype=float)
        return np.asarray(self.offset) + self.stride * index

    def to_index(self, pixel):
        """Continuous (unrounded) grid coordinates of a search-patch pixel position."""
        pixel = np.asarray(pixel, dtype=float)
        return (pixel - np.asarray(self.offset)) / self.stride

    def nearest_index(self, pixel) -> tuple[int, int]:
        r, c = np.rint(self.to_index(pixel)).astype(int)
        return int(r), int(c)


def as_batch(patch: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch)
    if patch.ndim == 2:
        return patch[None, :, :, None]
    if patch.ndim == 3:
        return patch[..., None]
    return patch


def embed(patch: np.ndarray, net: Network, train: bool = False) -> tuple[np.ndarray, Trace]:
    """Run the shared embedding network on a (H,W), (N,H,W) or (N,H,W,1) patch."""
    x = as_batch(patch)
    if x.shape[-1] != 1 or net.in_channels != 1:
        raise ConfigError(f"embedding expects single-channel patches, got {x.shape}")
    return net.forward(x, train=train)


def _check_pair(template: np.ndarray, search: np.ndarray) -> None:
    if template.ndim != search.ndim or template.ndim not in (3, 4):
        raise ConfigError(f"cross_correlate expects matching 3-d or 4-d inputs, got {template.shape} and {search.shape}")
    if template.shape[:-3] != search.shape[:-3] or template.shape[-1] != search.shape[-1]:
        raise ConfigError(
            f"cross_correlate channel/batch mismatch: template {template.shape} vs search {search.shape}"
        )
    if template.shape[-3] > search.shape[-3] or template.shape[-2] > search.shape[-2]:
        raise ConfigError(f"template {template.shape} larger than search {search.shape}")


def cross_correlate_direct(template: np.ndarray, search: np.ndarray) -> np.ndarray:
    """Sliding inner product accumulated channel by channel, row by row.

    Each output value is summed in (channel, row, col) order of the template,
    the same order as a scalar quadruple loop.
    """
    _check_pair(template, search)
    h, w = template.shape[-3:-1]
    oh = search.shape[-3] - h + 1
    ow = search.shape[-2] - w + 1
    batched = template.ndim == 4
    t = template if batched else template[None]
    s = search if batched else search[None]
    out = np.zeros((t.shape[0], oh, ow), dtype=np.result_type(t, s))
    for n in range(t.shape[0]):
        acc = out[n]
        for c in range(t.shape[-1]):
            sc = s[n, :, :, c]
            for u in range(h):
                for v in range(w):
                    acc += t[n, u, v, c] * sc[u:u + oh, v:v + ow]
    return out if batched else out[0]


def fft_shape(search_shape) -> tuple[int, int]:
    """FFT grid for a search of extent (H, W): padded up to 5-smooth lengths.

    Zero padding past H, W never wraps onto the valid correlation window, and
    lengths like 93 = 3 * 31 are several times slower than 96.
    """
    return tuple(next_fast_len(int(n), real=True) for n in search_shape)


def _spectrum(x: np.ndarray, shape) -> np.ndarray:
    # (..., H, W, C) -> (..., C, H', W'//2+1), float64 precision
    return np.fft.rfft2(np.moveaxis(x, -1, -3).astype(np.float64), s=shape)


def embedding_spectra(template: np.ndarray, search: np.ndarray):
    """Spectra of a template/search pair, shareable between forward and backward."""
    shape = fft_shape(search.shape[-3:-1])
    return _spectrum(template, shape), _spectrum(search, shape)


def cross_correlate_fft(template: np.ndarray, search: np.ndarray, template_spectrum=None,
                        spectra=None) -> np.ndarray:
    """Same result as :func:`cross_correlate_direct`, via real FFTs in float64.

    ``template_spectrum`` may carry a precomputed :func:`template_spectrum` of
    the template for repeated correlation against different searches;
    ``spectra`` both spectra from :func:`embedding_spectra`.
    """
    _check_pair(template, search)
    h, w = template.shape[-3:-1]
    oh = search.shape[-3] - h + 1
    ow = search.shape[-2] - w + 1
    shape = fft_shape(search.shape[-3:-1])
    if spectra is not None:
        ft, fs = spectra
    else:
        ft = _spectrum(template, shape) if template_spectrum is None else template_spectrum
        fs = _spectrum(search, shape)
    prod = (fs * np.conj(ft)).sum(axis=-3)
    out = np.fft.irfft2(prod, s=shape)[..., :oh, :ow]
    return out.astype(np.result_type(template, search))


def template_spectrum(template: np.ndarray, search_shape) -> np.ndarray:
    return _spectrum(template, fft_shape(search_shape[-3:-1]))


def cross_correlate(template: np.ndarray, search: np.ndarray, method: str = "fft") -> np.ndarray:
    """Unnormalized cross-correlation of template and search embeddings.

    Inputs are channels-last, (h,w,C)/(H,W,C) or batched (N,h,w,C)/(N,H,W,C);
    the output has extent (H-h+1, W-w+1) with a leading batch axis when the
    inputs have one.
    """
    if method == "direct":
        return cross_correlate_direct(template, search)
    if method == "fft":
        return cross_correlate_fft(template, search)
    raise ConfigError(f"unknown correlation method {method!r}")


def cross_correlate_backward(dscore: np.ndarray, template: np.ndarray, search: np.ndarray, spectra=None):
    """Gradients of a loss w.r.t. template and search embeddings given dL/dS.

    ``spectra`` reuses the forward pass's :func:`embedding_spectra` (batched only).
    """
    _check_pair(template, search)
    batched = template.ndim == 4
    t = template if batched else template[None]
    s = search if batched else search[None]
    d = dscore if batched else dscore[None]
    h, w = t.shape[1:3]
    sh, sw = s.shape[1:3]
    shape = fft_shape((sh, sw))
    ft, fs = spectra if spectra is not None and batched else embedding_spectra(t, s)
    fd = np.fft.rfft2(d.astype(np.float64), s=shape)[:, None]
    dt = np.fft.irfft2(fs * np.conj(fd), s=shape)[..., :h, :w]
    ds = np.fft.irfft2(ft * fd, s=shape)[..., :sh, :sw]
    dt = np.moveaxis(dt, 1, -1).astype(t.dtype)
    ds = np.moveaxis(ds, 1, -1).astype(s.dtype)
    return (dt, ds) if batched else (dt[0], ds[0])


def gaussian_map(shape, center, sigma: float) -> GaussianMap:
    """Peak-normalized Gaussian exp(-|u - center|^2 / (2 sigma^2)) on pixel centers.

    ``center`` is (row, col) in grid units and may be fractional or off-grid.
    """
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    rows, cols = int(shape[0]), int(shape[1])
    cr, cc = float(center[0]), float(center[1])
    gr = np.exp(-((np.arange(rows) - cr) ** 2) / (2.0 * sigma * sigma))
    gc = np.exp(-((np.arange(cols) - cc) ** 2) / (2.0 * sigma * sigma))
    return GaussianMap(np.outer(gr, gc), (cr, cc), float(sigma))


def l2_loss(scores: np.ndarray, target: np.ndarray):
    """Half sum of squared differences; returns ``(loss, dloss/dscores)``."""
    scores = getattr(scores, "values", scores)
    target = getattr(target, "values", target)
    if scores.shape != target.shape:
        raise ConfigError(f"l2_loss shape mismatch: scores {scores.shape} vs target {target.shape}")
    diff = scores - target.astype(scores.dtype)
    return 0.5 * float(np.sum(diff.astype(np.float64) ** 2)), diff


def binary_target(shape, center, radius: float) -> np.ndarray:
    """+1 within ``radius`` grid units of ``center``, -1 elsewhere."""
    if radius >= min(shape):
        raise ConfigError(f"radius {radius} not smaller than map extent {tuple(shape)}")
    rr, cc = np.indices(shape)
    d2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2
    return np.where(d2 <= radius * radius, 1.0, -1.0)


def logistic_loss_baseline(scores: np.ndarray, target: np.ndarray, weighting: str = "none"):
    """Pixel-wise logistic loss log(1 + exp(-y s)) against a +-1 target.

    ``weighting="none"`` averages over pixels; ``"class-balanced"`` gives the
    positive and negative classes half of the total weight each.
    Returns ``(loss, dloss/dscores)``.
    """
    scores = getattr(scores, "values", scores)
    if scores.shape != target.shape:
        raise ConfigError(f"logistic loss shape mismatch: {scores.shape} vs {target.shape}")
    y = target.astype(np.float64)
    s = scores.astype(np.float64)
    if weighting == "none":
        weights = np.full(y.shape, 1.0 / y.size)
    elif weighting == "class-balanced":
        pos = y > 0
        n_pos = int(pos.sum())
        n_neg = y.size - n_pos
        weights = np.where(pos, 0.5 / max(n_pos, 1), 0.5 / max(n_neg, 1))
        if n_pos == 0 or n_neg == 0:
            weights = np.full(y.shape, 1.0 / y.size)
    else:
        raise ConfigError(f"unknown weighting {weighting!r}")
    margin = -y * s
    per_pixel = np.logaddexp(0.0, margin)
    grad = -y * weights * _sigmoid(margin)
    return float(np.sum(weights * per_pixel)), grad.astype(scores.dtype)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))
