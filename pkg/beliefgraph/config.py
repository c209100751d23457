#!/usr/bin/env python3
"""
Configuration module for the belief-graph laboratory.
Handles the experiment configuration: nested dataclass sections, strict
YAML loading, dotted-key and environment overrides, and hashing.
"""

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence

import yaml

from beliefgraph.errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "BELIEFGRAPH__"


@dataclass
class WorldgenConfig:
    difficulty: int = 1
    train_games: int = 100
    valid_games: int = 20
    test_games: int = 20
    seed: int = 0
    off_path_rate: float = 0.3  # detour probability per walkthrough step
    capacity: int = 40  # entity slots N
    max_steps: int = 50


@dataclass
class ModelConfig:
    hidden: int = 64
    word_dim: int = 300
    node_dim: int = 100
    relation_dim: int = 32
    graph_layers: int = 6
    bases: int = 3
    conv_layers: int = 5
    kernel: int = 5
    decoder_max_len: int = 200
    word_vectors: str = ""  # optional `word v1 ... vD` file
    seed: int = 0


@dataclass
class PretrainConfig:
    task: str = "og"
    epochs: int = 10
    batch_size: int = 8
    unroll: int = 5  # truncated-BPTT window in game steps
    lr: float = 1e-3
    clip: float = 5.0
    graph_type: str = "seen"
    valid_fraction: float = 0.1
    seed: int = 0


@dataclass
class TrainConfig:
    agent: str = "gata-coc"
    gamma: float = 0.9
    n_min: int = 1
    n_max: int = 3
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    epsilon_anneal: int = 20000  # episodes
    buffer_capacity: int = 500000
    priority_alpha: float = 0.6
    beta_start: float = 0.4
    beta_end: float = 1.0
    batch_size: int = 64
    update_every: int = 50  # collected steps per learning step
    target_sync: int = 500  # episodes
    warmup: int = 100  # episodes
    eval_every: int = 100
    patience: int = 3
    tolerance: float = 0.1
    filter_mode: str = "step"  # "step" or "episode" mean reward
    max_steps: int = 50
    nb_episodes: int = 2000
    lr: float = 1e-3
    clip: float = 5.0
    burn_in: int = 4
    update_length: int = 4
    count_gamma: float = 0.5
    count_lambda: float = 0.1
    use_text: bool = False
    graph_type: str = "full"
    init_checkpoint: str = ""
    freeze_init: bool = False
    seed: int = 0


@dataclass
class ProbeConfig:
    source: str = "ground-truth"
    epochs: int = 10
    lr: float = 1e-4
    batch_size: int = 8
    train_games: int = 100
    test_games: int = 20
    threshold: float = 0.5
    heatmap_relation: str = "at"
    heatmap_games: int = 1
    subtract_mean: bool = True
    seed: int = 0


@dataclass
class PathsConfig:
    games: str = "runs/games"
    corpus: str = "runs/corpus.jsonl"
    checkpoints: str = "runs/checkpoints"
    updater: str = ""
    generator: str = ""
    output: str = "runs"


@dataclass
class LoggingConfig:
    level: str = "INFO"
    show_progress: bool = False


@dataclass
class ExperimentConfig:
    worldgen: WorldgenConfig = field(default_factory=WorldgenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(value: Any, target: Any, key: str) -> Any:
    """Check a value against the type of its default"""
    if isinstance(target, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(target, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if isinstance(target, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        # YAML 1.1 reads exponent forms without a dot (1e-4) as strings
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if isinstance(target, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def _merge(section: Any, data: Mapping[str, Any], prefix: str) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {data!r}")
    names = {f.name for f in dataclasses.fields(section)}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"unknown config key: {dotted}")
        current = getattr(section, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, f"{dotted}.")
        else:
            setattr(section, key, _coerce(value, current, dotted))


def from_dict(data: Optional[Mapping[str, Any]]) -> ExperimentConfig:
    config = ExperimentConfig()
    if data:
        _merge(config, data, "")
    return config


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """Load a YAML configuration file over the defaults

    Args:
        path: YAML file, or None for defaults only

    Returns:
        ExperimentConfig
    """
    if not path:
        return ExperimentConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"missing config file: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed YAML in {path}: {e}") from None
    return from_dict(data or {})


def apply_override(config: ExperimentConfig, assignment: str) -> None:
    """Apply one `section.key=value` override; the value is read as a YAML scalar"""
    if "=" not in assignment:
        raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    parts = dotted.strip().split(".")
    if len(parts) < 2 or not all(parts):
        raise ConfigError(f"override key must be dotted, got {dotted!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as e:
        raise ConfigError(f"bad override value for {dotted}: {e}") from None
    nested: Any = value
    for part in reversed(parts):
        nested = {part: nested}
    _merge(config, nested, "")


def apply_overrides(config: ExperimentConfig, assignments: Sequence[str] = (),
                    environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Apply environment overrides, then command-line overrides"""
    environ = os.environ if environ is None else environ
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX):
            dotted = ".".join(part.lower() for part in name[len(ENV_PREFIX):].split("__"))
            apply_override(config, f"{dotted}={environ[name]}")
    for assignment in assignments:
        apply_override(config, assignment)
    return config


def config_hash(config: ExperimentConfig) -> str:
    """SHA-1 of the canonical JSON form"""
    text = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(text.encode("utf-8")).hexdigest()


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


def section_names() -> List[str]:
    return [f.name for f in dataclasses.fields(ExperimentConfig)]
