"""Run configuration and its flat ``section.key = value`` text form."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields

from .blur import TrajectoryParams
from .losses import LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr0: float = 1e-3
    total_epochs: int = 40
    batch_size: int = 16
    rule: str = "adam"
    schedule: str = "linear"


@dataclass
class DataConfig:
    train_index: str = ""
    val_index: str = ""
    image_dir: str = ""
    blurred_dir: str = ""  # pre-blurred copies; empty -> synthesize per image from the seed
    synthetic_images: int = 0  # > 0 -> rendered toy set instead of files
    synthetic_val_images: int = 0


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    color_jitter_strength: float = 0.2


@dataclass
class BlurConfig:
    length_steps: int = 64
    anxiety: float = 0.005
    max_jitter: float = 0.01
    exposure_fraction: float = 1.0
    initial_speed: float = 0.15
    k_psf: int = 17

    def trajectory_params(self) -> TrajectoryParams:
        return TrajectoryParams(self.length_steps, self.anxiety, self.max_jitter,
                                self.exposure_fraction, self.initial_speed)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    blur: BlurConfig = field(default_factory=BlurConfig)
    phase_switch_ratio: float = 0.5
    seed: int = 0
    out_dir: str = "runs/default"
    score_thresh: float = 0.1
    k_max: int = 100

    def validate(self) -> None:
        if not 0 < self.phase_switch_ratio < 1:
            raise ConfigError("phase_switch_ratio must be in (0, 1)")
        if self.optim.batch_size < 1 or self.optim.total_epochs < 1:
            raise ConfigError("batch_size and total_epochs must be >= 1")
        if self.optim.batch_size < 2 and self.model.fuses_with_magff:
            # the global attention branch batch-normalizes one pooled value per image
            raise ConfigError("MAGFF fusion needs optim.batch_size >= 2")
        if self.optim.rule not in ("adam", "sgd") or self.optim.schedule not in ("constant", "linear"):
            raise ConfigError("optim.rule must be adam|sgd and optim.schedule constant|linear")
        try:
            self.model.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @property
    def switch_epoch(self) -> int:
        """Last epoch of the joint phase."""
        return max(1, round(self.phase_switch_ratio * self.optim.total_epochs))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(text: str, current, key: str):
    text = text.strip()
    try:
        if isinstance(current, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(current).__name__}") from None
    return text


def _flatten(obj, prefix: str = ""):
    for f in fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            yield from _flatten(v, prefix + f.name + ".")
        else:
            yield prefix + f.name, v


def format_config(cfg: RunConfig) -> str:
    """Canonical text: one sorted ``key = value`` per line."""
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in sorted(_flatten(cfg)))


def config_digest(cfg: RunConfig | str) -> str:
    text = cfg if isinstance(cfg, str) else format_config(cfg)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def set_key(cfg: RunConfig, key: str, text: str) -> None:
    obj = cfg
    *path, leaf = key.split(".")
    for part in path:
        if not dataclasses.is_dataclass(obj) or not hasattr(obj, part):
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(obj, leaf)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{key!r} is a section, not a value")
    setattr(obj, leaf, _parse_value(text, current, key))


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Blank lines and ``#`` comments are ignored; later keys override earlier ones."""
    cfg = base if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        try:
            set_key(cfg, key.strip(), value)
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    # frozen/validated sub-objects re-checked after all overrides
    cfg.loss = LossWeights(**dataclasses.asdict(cfg.loss))
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
