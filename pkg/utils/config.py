"""
Pipeline configuration.

Precedence, lowest first: dataclass defaults < KEY=VALUE config file <
GMAP_* environment variables < command-line overrides. Keys are the
upper-snake field names; nested sections carry a prefix (RENDER_ALPHA_MIN,
MINING_DELTA1, ...).
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Tuple

from dotenv import dotenv_values

from constants.defaults import DISTILL_STEPS, ENV_PREFIX, ENV_STEPS, LOG_EVERY, SYNTH_FEAT_DIM
from utils.emerseg import MiningConfig
from utils.errors import ConfigError, GaussianMappingError
from utils.losses import LossWeights
from utils.splat_renderer import RenderSettings
from utils.synth_world import SceneSpec
from utils.trainer import DensifyConfig, LearningRates, TrainingSettings

logger = logging.getLogger(__name__)

SECTIONS = {
    "render": "RENDER",
    "densify": "DENSIFY",
    "weights": "WEIGHT",
    "lrs": "LR",
    "mining": "MINING",
    "synth": "SYNTH",
}
TRUE_VALUES = {"1", "true", "yes", "on"}
FALSE_VALUES = {"0", "false", "no", "off"}


@dataclass
class PipelineConfig:
    dataset_dir: str = "data/synth"
    output_dir: str = "output"
    seed: int = 0
    run_init: bool = True
    run_distill: bool = True
    run_mine: bool = True
    run_env: bool = True
    run_eval: bool = True
    distill_steps: int = DISTILL_STEPS
    env_steps: int = ENV_STEPS
    use_depth_sky: bool = True
    feat_dim: int = SYNTH_FEAT_DIM
    sh_degree: int = 0
    workers: int = 1
    progress: bool = True
    log_every: int = LOG_EVERY
    render: RenderSettings = field(default_factory=RenderSettings)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lrs: LearningRates = field(default_factory=LearningRates)
    mining: MiningConfig = field(default_factory=MiningConfig)
    synth: SceneSpec = field(default_factory=SceneSpec)

    def validate(self) -> None:
        if self.distill_steps < 0 or self.env_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.feat_dim < 1:
            raise ConfigError("feat_dim must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        try:
            self.render.validate()
            self.densify.validate()
            self.weights.validate()
            self.lrs.validate()
            self.mining.validate()
            self.synth.validate()
        except GaussianMappingError as e:
            raise ConfigError(str(e))

    def training_settings(self) -> TrainingSettings:
        render = dataclasses.replace(self.render, workers=self.workers)
        return TrainingSettings(lrs=self.lrs, weights=self.weights, densify=self.densify, render=render,
                                seed=self.seed, log_every=self.log_every, progress=self.progress)

    def render_settings(self) -> RenderSettings:
        return dataclasses.replace(self.render, workers=self.workers)


def _slots(cfg: PipelineConfig):
    """(KEY, owner object, field) for every leaf setting."""
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in SECTIONS:
            for sub in dataclasses.fields(value):
                yield f"{SECTIONS[f.name]}_{sub.name.upper()}", value, sub
        else:
            yield f.name.upper(), cfg, f


def _coerce(key: str, raw: str, current):
    text = str(raw).strip()
    try:
        if isinstance(current, bool):
            lowered = text.lower()
            if lowered in TRUE_VALUES:
                return True
            if lowered in FALSE_VALUES:
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            kind = type(current[0]) if current else float
            values = tuple(kind(p) for p in parts)
            if current and len(values) != len(current):
                raise ValueError(text)
            return values
        return text
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for {key}: {raw!r}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def apply_overrides(cfg: PipelineConfig, values: Mapping[str, str], source: str = "overrides") -> PipelineConfig:
    slots = {key: (owner, f) for key, owner, f in _slots(cfg)}
    for key, raw in values.items():
        name = key.strip().upper()
        if name not in slots:
            raise ConfigError(f"unknown configuration key {name} (from {source})")
        if raw is None:
            continue
        owner, f = slots[name]
        setattr(owner, f.name, _coerce(name, raw, getattr(owner, f.name)))
    return cfg


def environment_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    return {k[len(ENV_PREFIX):]: v for k, v in environ.items() if k.startswith(ENV_PREFIX)}


def parse_assignments(items: Iterable[str]) -> Dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"expected KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def load_config(config_file: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None,
                environ: Optional[Mapping[str, str]] = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if config_file:
        if not os.path.exists(config_file):
            raise ConfigError(f"config file not found: {config_file}")
        apply_overrides(cfg, dotenv_values(config_file), config_file)
    apply_overrides(cfg, environment_overrides(environ), "environment")
    apply_overrides(cfg, overrides or {}, "command line")
    cfg.validate()
    return cfg


def config_lines(cfg: PipelineConfig) -> Tuple[str, ...]:
    return tuple(sorted(f"{key}={_format(getattr(owner, f.name))}" for key, owner, f in _slots(cfg)))


def write_resolved(cfg: PipelineConfig, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write("\n".join(config_lines(cfg)) + "\n")
    logger.info(f"Resolved configuration written to {path}")
