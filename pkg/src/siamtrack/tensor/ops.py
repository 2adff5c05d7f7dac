"""Functional forward/backward kernels for the layers the embedding network uses.

Activations are channels-last (N, H, W, C) numpy arrays. Every forward returns ``(out, cache)``;
the matching backward consumes that cache. Convolutions use valid padding and
an im2col + single matmul formulation so the heavy lifting happens in BLAS.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import ConfigError, NumericalError, UsageError


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericalError(f"{what} contains {bad} non-finite value(s)")
    return x


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    """Valid-padding output extent: floor((size - kernel) / stride) + 1."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if kernel > size:
        raise ConfigError(f"kernel {kernel} does not fit input extent {size}")
    return (size - kernel) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, oh, ow, kh, kw, C) strided view, no copy
    n, h, w, c = x.shape
    oh = conv_output_size(h, kh, stride)
    ow = conv_output_size(w, kw, stride)
    s0, s1, s2, s3 = x.strides
    return as_strided(
        x,
        shape=(n, oh, ow, kh, kw, c),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )


@dataclass
class ConvCache:
    cols: np.ndarray  # (N*oh*ow, kh*kw*C)
    weights: np.ndarray
    stride: int
    input_shape: tuple


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int = 1):
    """Valid cross-correlation of ``x`` (N,H,W,C) with ``weights`` (kh,kw,C,F).

    Returns ``(y, cache)`` with ``y`` of shape (N, oh, ow, F).
    """
    if x.ndim != 4 or weights.ndim != 4:
        raise ConfigError(
            f"conv2d expects 4-d input and weights, got input {x.shape} and weights {weights.shape}"
        )
    n, h, w, c = x.shape
    kh, kw, wc, f = weights.shape
    if c != wc:
        raise ConfigError(
            f"conv2d channel mismatch: input {x.shape} vs weights {weights.shape}"
        )
    if kh > h or kw > w:
        raise ConfigError(
            f"conv2d kernel does not fit: input {x.shape} vs weights {weights.shape}"
        )
    if bias.shape != (f,):
        raise ConfigError(f"conv2d bias shape {bias.shape} does not match weights {weights.shape}")
    x = np.ascontiguousarray(x)
    win = _windows(x, kh, kw, stride)
    oh, ow = win.shape[1], win.shape[2]
    cols = win.reshape(n * oh * ow, kh * kw * c)  # copies
    y = cols @ weights.reshape(-1, f)
    y += bias
    return y.reshape(n, oh, ow, f), ConvCache(cols, weights, stride, x.shape)


def conv2d_infer(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int = 1,
                 relu: bool = False, block_bytes: int = 1 << 20) -> np.ndarray:
    """:func:`conv2d_forward` (optionally + ReLU) without a cache, in bands of output rows.

    Each band's im2col block stays near ``block_bytes`` so it is consumed from
    cache; one full-size im2col of a 407 px search is 8-16 MB per layer.
    """
    n, h, w, c = x.shape
    kh, kw, _, f = weights.shape
    oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    row_bytes = n * ow * kh * kw * c * x.dtype.itemsize
    band = max(1, block_bytes // max(row_bytes, 1))
    wmat = weights.reshape(-1, f)
    y = np.empty((n, oh, ow, f), dtype=np.result_type(x, weights))
    x = np.ascontiguousarray(x)
    for r0 in range(0, oh, band):
        r1 = min(oh, r0 + band)
        rows = x[:, r0 * stride:(r1 - 1) * stride + kh]
        cols = _windows(rows, kh, kw, stride).reshape(-1, kh * kw * c)
        out = cols @ wmat
        out += bias
        if relu:
            np.maximum(out, 0, out=out)
        y[:, r0:r1] = out.reshape(n, r1 - r0, ow, f)
    return y


def conv2d_backward(dy: np.ndarray, cache: ConvCache | None, need_dx: bool = True):
    """Returns ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is False."""
    if cache is None:
        raise UsageError("conv2d_backward called before conv2d_forward")
    n, oh, ow, f = dy.shape
    w = cache.weights
    kh, kw, c, _ = w.shape
    dy2 = dy.reshape(-1, f)
    dw = (cache.cols.T @ dy2).reshape(w.shape)
    db = channel_sum(dy2)
    if not need_dx:
        return None, dw, db
    dx = np.zeros(cache.input_shape, dtype=dy.dtype)
    s = cache.stride
    # one contiguous (L, C) block per kernel tap scattered back, faster than a full col2im
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + s * oh:s, j:j + s * ow:s] += (dy2 @ w[i, j].T).reshape(n, oh, ow, c)
    return dx, dw, db


def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.maximum(x, np.zeros((), dtype=x.dtype)), mask


def relu_backward(dy: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        raise UsageError("relu_backward called before relu_forward")
    return dy * mask


def channel_sum(x: np.ndarray) -> np.ndarray:
    """Sum over every axis but the last, as a BLAS matrix-vector product."""
    flat = x.reshape(-1, x.shape[-1])
    return np.ones(flat.shape[0], dtype=x.dtype) @ flat


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray  # (C,)
    gamma: np.ndarray
    train: bool


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
):
    """Per-channel batch normalization over (N, H, W).

    In train mode the batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used frozen.
    """
    if x.ndim != 4 or x.shape[-1] != gamma.shape[0]:
        raise ConfigError(f"batchnorm input {x.shape} does not match {gamma.shape[0]} channels")
    if train:
        count = x.size // x.shape[-1]
        mean = channel_sum(x) / count
        centered = x - mean
        var = channel_sum(centered * centered) / count
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered if train else x - mean.astype(x.dtype)
    xhat *= inv_std
    y = xhat * gamma
    y += beta
    return y, BatchNormCache(xhat, inv_std, gamma, train)


def batchnorm_backward(dy: np.ndarray, cache: BatchNormCache | None):
    """Returns ``(dx, dgamma, dbeta)``."""
    if cache is None:
        raise UsageError("batchnorm_backward called before batchnorm_forward")
    xhat = cache.xhat
    dbeta = channel_sum(dy)
    dgamma = channel_sum(dy * xhat)
    g = cache.gamma * cache.inv_std
    if not cache.train:
        return dy * g, dgamma, dbeta
    m = dy.size // dy.shape[-1]
    dx = g * (dy - dbeta / m - xhat * (dgamma / m))
    return dx, dgamma, dbeta
