"""Pipeline configuration: a flat ``key = value`` text format with typed, validated fields."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .vae import Variant


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # data
    episodes: int = 1000
    frames: int = 100
    stride: int = 4
    obs_height: int = 64
    obs_width: int = 64
    # models
    variant: str = "DiffInputOutput"
    z_dim: int = 32
    h_dim: int = 128
    mixtures: int = 5
    beta: str = "auto"  # "auto" -> 1 / (obs_height * obs_width)
    diff_weight: float = 1.0
    channels: str = "16,32,64,128"
    dual_branch: bool = False
    vae_epochs: int = 10
    vae_batch: int = 64
    vae_lr: float = 1e-3
    rnn_epochs: int = 20
    rnn_batch: int = 16
    rnn_lr: float = 1e-3
    rnn_window: int = 0  # truncated-BPTT window in steps; 0 = whole episode
    rnn_sampled_targets: bool = False  # predict sampled next latents instead of posterior means
    # controller
    generations: int = 600
    population: int = 8
    sigma0: float = 0.1
    rollouts_per_agent: int = 1
    frame_limit: int = 1000
    z_only: bool = False
    eval_rollouts: int = 100
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.episodes >= 1, "episodes must be >= 1")
        need(self.stride >= 1, "stride must be >= 1")
        need(self.frames > self.stride, f"frames ({self.frames}) must exceed stride ({self.stride})")
        need(self.obs_height >= 1 and self.obs_width >= 1, "observation size must be positive")
        try:
            Variant(self.variant)
        except ValueError:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of "
                              f"{', '.join(v.value for v in Variant)}") from None
        need(self.z_dim >= 1, "z_dim must be >= 1")
        need(self.h_dim >= 1, "h_dim must be >= 1")
        need(self.mixtures >= 1, "mixtures must be >= 1")
        need(self.beta == "auto" or _is_float(self.beta) and float(self.beta) >= 0,
             f"beta must be 'auto' or a non-negative number, got {self.beta!r}")
        need(self.diff_weight >= 0, "diff_weight must be >= 0")
        try:
            chans = self.channel_tuple
        except ValueError:
            raise ConfigError(f"channels must be comma-separated integers, got {self.channels!r}") from None
        need(len(chans) >= 1 and all(c >= 1 for c in chans), "channels must be positive")
        scale = 2 ** len(chans)
        need(self.obs_height % scale == 0 and self.obs_width % scale == 0,
             f"observation {self.obs_height}x{self.obs_width} must be divisible by {scale} for {len(chans)} conv layers")
        for name in ("vae_epochs", "vae_batch", "rnn_epochs", "rnn_batch", "generations",
                     "rollouts_per_agent", "frame_limit", "eval_rollouts"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        need(self.rnn_window >= 0, "rnn_window must be >= 0 (0 = whole episode)")
        need(self.population >= 2, "population must be >= 2")
        need(self.vae_lr > 0 and self.rnn_lr > 0 and self.sigma0 > 0, "learning rates and sigma0 must be positive")
        need(self.seed >= 0, "seed must be >= 0")
        return self

    @property
    def channel_tuple(self) -> tuple[int, ...]:
        return tuple(int(c) for c in self.channels.split(","))

    @property
    def effective_beta(self) -> float:
        if self.beta == "auto":
            return 1.0 / (self.obs_height * self.obs_width)
        return float(self.beta)

    def resolved(self) -> "PipelineConfig":
        """Copy with ``beta`` pinned to its numeric value."""
        return dataclasses.replace(self, beta=repr(self.effective_beta))

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def subset_hash(self, keys) -> str:
        text = "".join(f"{k} = {_format(getattr(self, k))}\n" for k in keys)
        return hashlib.sha256(text.encode()).hexdigest()

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_text())


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} (expected {kind})") from None
    return raw


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, raw)
    return dataclasses.replace(base or PipelineConfig(), **values)


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the file, then ``overrides`` (already typed or raw strings); validated."""
    cfg = PipelineConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config file {path}: {err.strerror}") from None
        cfg = parse_config_text(text, cfg)
    if overrides:
        typed = {k: parse_value(k, v) if isinstance(v, str) else v for k, v in overrides.items()}
        cfg = dataclasses.replace(cfg, **typed)
    return cfg.validate()
