"""Run configuration: one JSON file drives data, model, training, decoding.

Parsing is strict: unknown keys anywhere are rejected before any work
starts, and every section reuses the owning module's dataclass defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .decoding import DecodeConfig
from .embedding import SmoothingConfig
from .losses import LossConfig
from .model import ARCHITECTURES, DecoderConfig, EncoderConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 3e-3
    warmup_steps: int = 200
    batch_size: int = 16
    epochs: int = 8
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.lr <= 0 or self.warmup_steps < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("optimizer settings must be positive")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")


@dataclass
class AugmentConfig:
    enabled: bool = True
    num_time_masks: int = 1
    time_width: int = 2
    num_freq_masks: int = 1
    freq_width: int = 2


@dataclass
class EmbedConfig:
    dim: int = 32
    window: int = 2
    vectors_path: str | None = None

    def __post_init__(self):
        if self.dim < 1 or self.window < 1:
            raise ValueError("embedding dim and window must be >= 1")


@dataclass
class PathsConfig:
    data_dir: str = "data"
    work_dir: str = "work"


@dataclass
class RunConfig:
    architecture: str = "mask_ctc_p2m"
    seed: int = 0
    tie_projections: bool = False
    matreg_pair: str = "auto"  # auto | none | ctc_emb | p2m_emb | both
    data: SynthConfig = field(default_factory=SynthConfig)
    encoder: EncoderConfig = None  # type: ignore[assignment]
    p2m: DecoderConfig = field(default_factory=lambda: DecoderConfig(num_layers=1))
    cmlm: DecoderConfig = field(default_factory=lambda: DecoderConfig(num_layers=2))
    loss: LossConfig = field(default_factory=LossConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    decode: DecodeConfig = None  # type: ignore[assignment]
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    embedding: EmbedConfig = field(default_factory=EmbedConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.matreg_pair not in ("auto", "none", "ctc_emb", "p2m_emb", "both"):
            raise ValueError(f"unknown matreg_pair {self.matreg_pair!r}")
        if self.encoder is None:
            self.encoder = EncoderConfig(input_dim=self.data.feature_dim)
        if self.decode is None:
            self.decode = DecodeConfig(architecture=self.architecture)


_SECTIONS = {
    "data": SynthConfig,
    "encoder": EncoderConfig,
    "p2m": DecoderConfig,
    "cmlm": DecoderConfig,
    "loss": LossConfig,
    "smoothing": SmoothingConfig,
    "decode": DecodeConfig,
    "optim": OptimConfig,
    "augment": AugmentConfig,
    "embedding": EmbedConfig,
    "paths": PathsConfig,
}

_SCALAR_KEYS = ("architecture", "seed", "tie_projections", "matreg_pair")


def _build_section(cls, payload: dict, section: str, extra: dict | None = None):
    if not isinstance(payload, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - names)
    if unknown:
        raise ConfigError(f"section {section!r} has unknown keys: {unknown}")
    kwargs = dict(payload)
    if extra:
        for k, v in extra.items():
            kwargs.setdefault(k, v)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"section {section!r}: {e}") from None


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS) - set(_SCALAR_KEYS))
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    kwargs: dict = {k: raw[k] for k in _SCALAR_KEYS if k in raw}
    data = _build_section(SynthConfig, raw.get("data", {}), "data")
    kwargs["data"] = data
    if "seed" in raw:
        # one seed drives everything unless the data section pins its own
        if "seed" not in raw.get("data", {}):
            data.seed = int(raw["seed"])
    for section, cls in _SECTIONS.items():
        if section == "data":
            continue
        if section == "encoder":
            kwargs[section] = _build_section(
                cls, raw.get(section, {}), section, extra={"input_dim": data.feature_dim}
            )
        elif section == "decode":
            kwargs[section] = _build_section(
                cls,
                raw.get(section, {}),
                section,
                extra={"architecture": kwargs.get("architecture", "mask_ctc_p2m")},
            )
        elif section in raw:
            kwargs[section] = _build_section(cls, raw[section], section)
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_config(path, seed_override: int | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if seed_override is not None:
        raw["seed"] = seed_override
        raw.setdefault("data", {})
        raw["data"]["seed"] = seed_override
    return config_from_dict(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    out: dict = {k: getattr(cfg, k) for k in _SCALAR_KEYS}
    for section, _ in _SECTIONS.items():
        out[section] = dataclasses.asdict(getattr(cfg, section))
    return out
