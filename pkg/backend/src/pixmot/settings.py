from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import torch

from pixmot.dataset import SyntheticSpec
from pixmot.flow_matching import LossWeights, NoiseScaleConfig
from pixmot.mot_core import ModelConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "PIXMOT_"


class ConfigError(ValueError):
    pass


def _env(name: str, default: str | None = None) -> str | None:
    value = os.getenv(ENV_PREFIX + name)
    if value is None or not value.strip():
        return default
    return value.strip()


def home_dir() -> Path:
    return Path(_env("HOME", str(Path.home() / ".pixmot"))).expanduser()


def log_level() -> str:
    return (_env("LOG_LEVEL", "INFO") or "INFO").upper()


def num_threads() -> int | None:
    raw = _env("NUM_THREADS")
    if raw is None:
        return None
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{ENV_PREFIX}NUM_THREADS must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ConfigError(f"{ENV_PREFIX}NUM_THREADS must be positive, got {value}")
    return value


def scorer_url() -> str | None:
    raw = _env("SCORER_URL")
    return raw.rstrip("/") if raw else None


def scorer_timeout() -> float:
    return float(_env("SCORER_TIMEOUT", "10") or "10")


def scorer_workers() -> int:
    return max(1, int(_env("SCORER_WORKERS", "4") or "4"))


def configure_logging(level: str | None = None) -> None:
    logging.basicConfig(
        level=getattr(logging, level or log_level(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def apply_thread_settings() -> None:
    threads = num_threads()
    if threads is not None:
        torch.set_num_threads(threads)
        logger.debug("torch intra-op threads set to %d", threads)


@dataclass(frozen=True)
class TrainConfig:
    """Toy joint-training run; every optimiser and objective knob is a key."""

    model: ModelConfig = field(default_factory=ModelConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    seed: int = 0
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    lr_schedule: str = "constant"
    warmup_steps: int = 0
    min_lr: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    ema_ratio: float = 0.999
    lambda_und: float = 0.1
    lambda_gen: float = 1.0
    p_drop_text: float = 0.1
    p_drop_all: float = 0.1
    t_mu: float = -0.8
    t_sigma: float = 0.8
    sigma0: float = 1.0
    n0: int = 4
    max_resolution: int = 128
    freeze_understanding: bool = False
    log_every: int = 50

    def noise_config(self) -> NoiseScaleConfig:
        return NoiseScaleConfig.for_max_resolution(self.max_resolution, self.max_resolution, self.sigma0, self.n0)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_und, self.lambda_gen)


def validate_train_config(cfg: TrainConfig) -> TrainConfig:
    positive = ("steps", "batch_size", "lr", "adam_eps", "grad_clip", "t_sigma", "sigma0", "n0", "log_every")
    for name in positive:
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be positive, got {getattr(cfg, name)}")
    nonnegative = ("seed", "warmup_steps", "min_lr", "weight_decay", "lambda_und", "lambda_gen", "p_drop_text", "p_drop_all")
    for name in nonnegative:
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be nonnegative, got {getattr(cfg, name)}")
    for name in ("adam_beta1", "adam_beta2", "ema_ratio"):
        if not 0.0 <= getattr(cfg, name) < 1.0:
            raise ConfigError(f"{name} must lie in [0, 1), got {getattr(cfg, name)}")
    if cfg.lr_schedule not in ("constant", "cosine"):
        raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {cfg.lr_schedule!r}")
    if cfg.p_drop_text + cfg.p_drop_all > 1.0:
        raise ConfigError("p_drop_text + p_drop_all must not exceed 1")
    if cfg.lambda_und == 0 and cfg.lambda_gen == 0:
        raise ConfigError("lambda_und and lambda_gen cannot both be zero")
    if cfg.model.vocab_size < cfg.data.vocab_size:
        raise ConfigError(
            f"model.vocab_size {cfg.model.vocab_size} does not cover the {cfg.data.vocab_size}-word dataset vocabulary"
        )
    if cfg.max_resolution < cfg.data.image_size or cfg.max_resolution % 32:
        raise ConfigError(
            f"max_resolution {cfg.max_resolution} must be a multiple of 32 no smaller than the image size"
        )
    return cfg


def _nested(cls: type, name: str, raw: Any) -> Any:
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{name} must be an object, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key {name}.{unknown[0]}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} block: {exc}") from exc


def train_config_from_dict(raw: Mapping[str, Any]) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    values = dict(raw)
    if "model" in values:
        values["model"] = _nested(ModelConfig, "model", values["model"])
    if "data" in values:
        values["data"] = _nested(SyntheticSpec, "data", values["data"])
    try:
        cfg = TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return validate_train_config(cfg)


def train_config_to_dict(cfg: TrainConfig) -> dict[str, Any]:
    return asdict(cfg)


def load_train_config(path: str | os.PathLike[str]) -> TrainConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, Mapping):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return train_config_from_dict(raw)


def save_train_config(path: str | os.PathLike[str], cfg: TrainConfig) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile("w", dir=target.parent, delete=False, encoding="utf-8") as tmp:
        json.dump(train_config_to_dict(cfg), tmp, indent=4)
    os.replace(tmp.name, target)
    return target
