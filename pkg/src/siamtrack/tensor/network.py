"""Layer specifications and the sequential embedding network built from them."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, UsageError
from . import ops

LAYER_KINDS = ("conv2d", "batchnorm", "relu")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if min(self.in_channels, self.out_channels, self.kernel, self.stride) < 1:
                raise ConfigError(f"invalid conv2d spec {self}")

    def to_line(self) -> str:
        if self.kind == "conv2d":
            return (f"conv2d in={self.in_channels} out={self.out_channels} "
                    f"kernel={self.kernel} stride={self.stride}")
        if self.kind == "batchnorm":
            return f"batchnorm eps={self.eps!r} momentum={self.momentum!r}"
        return "relu"

    @classmethod
    def from_line(cls, line: str) -> "LayerSpec":
        kind, *fields = line.split()
        kw = {}
        names = {"in": "in_channels", "out": "out_channels", "kernel": "kernel", "stride": "stride"}
        for item in fields:
            key, _, value = item.partition("=")
            if key in names:
                kw[names[key]] = int(value)
            elif key in ("eps", "momentum"):
                kw[key] = float(value)
            else:
                raise ConfigError(f"unknown layer field {key!r} in {line!r}")
        return cls(kind, **kw)


def conv_block_profile(channels, kernels, strides, in_channels=1, eps=1e-5, momentum=0.1):
    """conv-bn-relu blocks with a bare conv at the end."""
    specs = []
    prev = in_channels
    last = len(channels) - 1
    for i, (ch, k, s) in enumerate(zip(channels, kernels, strides)):
        specs.append(LayerSpec("conv2d", prev, ch, k, s))
        if i != last:
            specs.append(LayerSpec("batchnorm", eps=eps, momentum=momentum))
            specs.append(LayerSpec("relu"))
        prev = ch
    return specs


DEFAULT_PROFILE = conv_block_profile((16, 32, 32, 32, 16), (7, 5, 3, 3, 3), (2, 2, 1, 1, 1))
TOY_PROFILE = conv_block_profile((3, 2), (3, 3), (2, 1))

PROFILES = {"default": DEFAULT_PROFILE, "toy": TOY_PROFILE}


def validate_profile(specs) -> None:
    if not specs:
        raise ConfigError("empty layer profile")
    if specs[-1].kind != "conv2d":
        raise ConfigError("the last layer of a profile must be conv2d")
    channels = None
    for spec in specs:
        if spec.kind == "conv2d":
            if channels is not None and spec.in_channels != channels:
                raise ConfigError(
                    f"conv2d expects {spec.in_channels} input channels, previous layer gives {channels}"
                )
            channels = spec.out_channels


def format_profile(specs) -> str:
    return "".join(s.to_line() + "\n" for s in specs)


def parse_profile(text: str):
    specs = [LayerSpec.from_line(ln) for ln in text.splitlines()
             if ln.strip() and not ln.lstrip().startswith("#")]
    validate_profile(specs)
    return specs


def load_profile(name_or_path: str):
    """A built-in profile name (``default``, ``toy``) or a path to a profile file."""
    if name_or_path in PROFILES:
        return list(PROFILES[name_or_path])
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(f"no such profile: {name_or_path}")
    return parse_profile(path.read_text())


@dataclass
class Trace:
    """Per-call forward caches, one per layer. Independent calls on the same
    network (template and search branches) each get their own trace."""

    caches: list = field(default_factory=list)
    train: bool = False


# The unnormalized correlation of two fan-in-initialized embeddings is of order
# (embedding size)^2, far above the unit-peak targets; shrinking the head keeps
# the first Adam steps in a sane regime.
HEAD_GAIN = 0.01


class Network:
    """Sequential conv/batchnorm/relu stack with explicit forward/backward.

    Activations are channels-last (N, H, W, C); conv weights are (kh, kw, C_in, C_out).
    """

    def __init__(self, specs, seed: int = 0, dtype=np.float32, head_gain: float = HEAD_GAIN):
        specs = list(specs)
        validate_profile(specs)
        self.specs = specs
        self.dtype = np.dtype(dtype)
        self.params: list[dict[str, np.ndarray]] = []
        self.buffers: list[dict[str, np.ndarray]] = []
        rng = np.random.default_rng(seed)
        last_conv = max(i for i, s in enumerate(specs) if s.kind == "conv2d")
        channels = specs[0].in_channels
        for i, spec in enumerate(specs):
            if spec.kind == "conv2d":
                fan_in = spec.in_channels * spec.kernel ** 2
                # Kaiming (He) init for layers followed by ReLU, plain fan-in for the head
                std = np.sqrt((1.0 if i == last_conv else 2.0) / fan_in)
                if i == last_conv:
                    std *= head_gain
                w = rng.standard_normal((spec.kernel, spec.kernel, spec.in_channels, spec.out_channels)) * std
                self.params.append({"weight": w.astype(self.dtype),
                                    "bias": np.zeros(spec.out_channels, self.dtype)})
                self.buffers.append({})
                channels = spec.out_channels
            elif spec.kind == "batchnorm":
                self.params.append({"gamma": np.ones(channels, self.dtype),
                                    "beta": np.zeros(channels, self.dtype)})
                self.buffers.append({"running_mean": np.zeros(channels, self.dtype),
                                     "running_var": np.ones(channels, self.dtype)})
            else:
                self.params.append({})
                self.buffers.append({})

    @property
    def in_channels(self) -> int:
        return self.specs[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.specs[-1].out_channels

    @property
    def total_stride(self) -> int:
        s = 1
        for spec in self.specs:
            if spec.kind == "conv2d":
                s *= spec.stride
        return s

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for spec in self.specs:
            if spec.kind == "conv2d":
                rf += (spec.kernel - 1) * jump
                jump *= spec.stride
        return rf

    def output_size(self, size: int) -> int:
        for spec in self.specs:
            if spec.kind == "conv2d":
                size = ops.conv_output_size(size, spec.kernel, spec.stride)
        return size

    def astype(self, dtype) -> "Network":
        """Copy of the network with parameters and buffers cast to ``dtype``."""
        other = object.__new__(Network)
        other.specs = list(self.specs)
        other.dtype = np.dtype(dtype)
        other.params = [{k: v.astype(dtype) for k, v in p.items()} for p in self.params]
        other.buffers = [{k: v.astype(dtype) for k, v in b.items()} for b in self.buffers]
        return other

    def copy(self) -> "Network":
        return self.astype(self.dtype)

    def forward(self, x: np.ndarray, train: bool = False):
        if x.ndim != 4 or x.shape[-1] != self.in_channels:
            raise ConfigError(f"network expects (N, H, W, {self.in_channels}) input, got {x.shape}")
        if min(x.shape[1:3]) < self.receptive_field:
            raise ConfigError(
                f"input extent {x.shape[1:3]} smaller than receptive field {self.receptive_field}"
            )
        x = np.asarray(x, dtype=self.dtype)
        trace = Trace(train=train)
        for spec, p, buf in zip(self.specs, self.params, self.buffers):
            if spec.kind == "conv2d":
                x, cache = ops.conv2d_forward(x, p["weight"], p["bias"], spec.stride)
            elif spec.kind == "batchnorm":
                x, cache = ops.batchnorm_forward(
                    x, p["gamma"], p["beta"], buf["running_mean"], buf["running_var"],
                    train, spec.momentum, spec.eps)
            else:
                x, cache = ops.relu_forward(x)
            trace.caches.append(cache)
        return x, trace

    def infer(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode :meth:`forward` without a trace.

        Batchnorm after a conv is folded into the conv's weights and a following
        ReLU is applied band by band, so each layer makes one pass over memory.
        """
        if x.ndim != 4 or x.shape[-1] != self.in_channels:
            raise ConfigError(f"network expects (N, H, W, {self.in_channels}) input, got {x.shape}")
        if min(x.shape[1:3]) < self.receptive_field:
            raise ConfigError(
                f"input extent {x.shape[1:3]} smaller than receptive field {self.receptive_field}"
            )
        x = np.asarray(x, dtype=self.dtype)
        kinds = [spec.kind for spec in self.specs]
        i = 0
        while i < len(self.specs):
            spec, p, buf = self.specs[i], self.params[i], self.buffers[i]
            if spec.kind == "conv2d":
                w, b = p["weight"], p["bias"]
                i += 1
                if i < len(kinds) and kinds[i] == "batchnorm":
                    w, b = self._fold_batchnorm(i, w, b)
                    i += 1
                relu = i < len(kinds) and kinds[i] == "relu"
                i += relu
                x = ops.conv2d_infer(x, w, b, spec.stride, relu)
                continue
            if spec.kind == "batchnorm":
                x, _ = ops.batchnorm_forward(x, p["gamma"], p["beta"], buf["running_mean"],
                                             buf["running_var"], False, spec.momentum, spec.eps)
            else:
                x = np.maximum(x, 0)
            i += 1
        return x

    def _fold_batchnorm(self, i: int, weight: np.ndarray, bias: np.ndarray):
        # eval-mode batchnorm is y = (x - mean) * gamma / sqrt(var + eps) + beta per channel
        p, buf = self.params[i], self.buffers[i]
        scale = p["gamma"] / np.sqrt(buf["running_var"].astype(np.float64) + self.specs[i].eps)
        w = (weight * scale).astype(self.dtype)
        b = ((bias - buf["running_mean"]) * scale + p["beta"]).astype(self.dtype)
        return w, b

    def __call__(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.forward(x, train)[0]

    def backward(self, dy: np.ndarray, trace: Trace | None, need_dx: bool = False):
        """Backpropagate ``dy`` through a recorded forward pass.

        Returns ``(dx, grads)`` where ``grads`` mirrors ``self.params``.
        """
        if trace is None or len(trace.caches) != len(self.specs):
            raise UsageError("Network.backward called without a matching forward trace")
        grads: list[dict[str, np.ndarray]] = [{} for _ in self.specs]
        for i in range(len(self.specs) - 1, -1, -1):
            spec, cache = self.specs[i], trace.caches[i]
            if spec.kind == "conv2d":
                dy, dw, db = ops.conv2d_backward(dy, cache, need_dx=need_dx or i > 0)
                grads[i] = {"weight": dw, "bias": db}
            elif spec.kind == "batchnorm":
                dy, dg, dbeta = ops.batchnorm_backward(dy, cache)
                grads[i] = {"gamma": dg, "beta": dbeta}
            else:
                dy = ops.relu_backward(dy, cache)
        return dy, grads

    def named_parameters(self):
        for i, p in enumerate(self.params):
            for name, value in p.items():
                yield f"{i}.{name}", value

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order, matching :meth:`flat_grads`."""
        return [v for _, v in self.named_parameters()]

    def flat_grads(self, grads) -> list[np.ndarray]:
        return [g[name] for p, g in zip(self.params, grads) for name in p]

    def state_arrays(self):
        """Parameters and buffers in checkpoint order."""
        out = []
        for i, spec in enumerate(self.specs):
            if spec.kind == "conv2d":
                out += [(f"{i}.weight", self.params[i]["weight"]), (f"{i}.bias", self.params[i]["bias"])]
            elif spec.kind == "batchnorm":
                out += [(f"{i}.gamma", self.params[i]["gamma"]), (f"{i}.beta", self.params[i]["beta"]),
                        (f"{i}.running_mean", self.buffers[i]["running_mean"]),
                        (f"{i}.running_var", self.buffers[i]["running_var"])]
        return out
