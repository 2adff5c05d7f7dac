"""Run configuration: defaults < key=value file < SIAMTRACK_* environment < command-line flags."""
from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import data
from .errors import ConfigError
from .tracker import TrackerConfig
from .train import TrainConfig

ENV_PREFIX = "SIAMTRACK_"


@dataclass
class RunConfig:
    # physical constants, mm
    spacing_mm: float = 0.27
    sigma_loss_mm: float = 2.16
    sigma_prior_mm: float = 17.28
    d_max_mm: float = 8.64
    k: float = 0.5
    tau: float = 50.0
    # geometry
    template_size: int = 127
    search_size: int = 407
    train_search_size: int = 191
    profile: str = "default"
    # training
    batch_size: int = 16
    lr: float = 1e-4
    epochs: int = 100
    pairs_per_epoch: int = 512
    val_pairs: int = 64
    sigma_loss_grid: str = "image"
    loss: str = "l2"
    logistic_weighting: str = "none"
    logistic_radius_px: float = 16.0
    checkpoint_every: int = 10
    seed: int = 0
    # tracking
    regularize: bool = True

    def __post_init__(self):
        for name in ("spacing_mm", "sigma_loss_mm", "sigma_prior_mm", "d_max_mm", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.k <= 1:
            raise ConfigError(f"k must lie in (0, 1], got {self.k}")

    def px(self, mm: float) -> float:
        return mm / self.spacing_mm

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(
            template_size=self.template_size, search_size=self.search_size, k=self.k, tau=self.tau,
            sigma_prior_px=self.px(self.sigma_prior_mm), d_max_px=self.px(self.d_max_mm),
            regularize=self.regularize,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, lr=self.lr, epochs=self.epochs, pairs_per_epoch=self.pairs_per_epoch,
            val_pairs=self.val_pairs, sigma_loss_mm=self.sigma_loss_mm, spacing_mm=self.spacing_mm,
            sigma_loss_grid=self.sigma_loss_grid, seed=self.seed, checkpoint_every=self.checkpoint_every,
            loss=self.loss, logistic_weighting=self.logistic_weighting,
            logistic_radius_px=self.logistic_radius_px, template_size=self.template_size,
            search_size=self.train_search_size, profile=self.profile,
        )

    def to_dict(self) -> dict[str, str]:
        return {k: _fmt(v) for k, v in asdict(self).items()}

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())

    def save(self, path) -> None:
        data.write_keyvalue(path, self.to_dict())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, kind, text: str):
    try:
        if kind is bool or kind == "bool":
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
        return str(text)
    except ValueError as exc:
        raise ConfigError(f"config key {name}: {exc}") from exc


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def resolve(file=None, env=None, flags=None) -> RunConfig:
    """Merge the configuration sources; later sources win."""
    values: dict = {}
    if file is not None:
        path = Path(file)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        for key, text in data.read_keyvalue(path).items():
            if key not in _FIELDS:
                raise ConfigError(f"{path}: unknown config key {key!r}")
            values[key] = _coerce(key, _FIELDS[key], text)
    env = os.environ if env is None else env
    for key, kind in _FIELDS.items():
        name = ENV_PREFIX + key.upper()
        if name in env:
            values[key] = _coerce(key, kind, env[name])
    for key, value in (flags or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, _FIELDS[key], str(value)) if isinstance(value, str) else value
    return RunConfig(**values)


def echo(cfg: RunConfig, stream=None) -> None:
    """Print the fully resolved configuration (stderr by default)."""
    print("# resolved configuration\n" + cfg.dumps(), end="", file=stream or sys.stderr)
