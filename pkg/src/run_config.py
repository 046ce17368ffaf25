# src/run_config.py
"""
One JSON file drives every command:

    {
      "seed": 7, "num_classes": 8,
      "synth":   {TreeSpec fields},
      "train":   {TrainConfig fields},
      "fusion":  {FusionConfig fields},
      "encoder": {EncoderConfig fields, point_levels: [{SALevelConfig fields}]},
      "eval":    {EvalOptions fields},
      "paths":   {"data_dir": ..., "out_dir": ..., "num_trees": ...}
    }

Unknown keys at any level are rejected. CLI flags override file values.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Union

from src.evalbench import EvalOptions
from src.fusion import FusionConfig
from src.nncore.encoders import EncoderConfig, SALevelConfig
from src.synth import TreeSpec
from src.train import TrainConfig
from src.utils.errors import ConfigError, TreeLabelError
from src.utils.logger import logger

PathLike = Union[str, Path]


@dataclass
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "runs"
    num_trees: int = 60


@dataclass
class RunConfig:
    seed: int = 0
    num_classes: int = 8
    synth: TreeSpec = field(default_factory=TreeSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "num_classes": self.num_classes,
            "synth": self.synth.to_dict(),
            "train": self.train.to_dict(),
            "fusion": self.fusion.to_dict(),
            "encoder": self.encoder.to_dict(),
            "eval": asdict(self.eval),
            "paths": asdict(self.paths),
        }


SECTIONS = {
    "synth": TreeSpec,
    "train": TrainConfig,
    "fusion": FusionConfig,
    "encoder": EncoderConfig,
    "eval": EvalOptions,
    "paths": PathsConfig,
}
TOP_LEVEL = {"seed", "num_classes", *SECTIONS}


def _field_names(cls) -> set:
    return {f.name for f in fields(cls)}


def _check_keys(where: str, raw: Dict[str, Any], allowed: set) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object, got {type(raw).__name__}")
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _build(name: str, cls, raw: Dict[str, Any]):
    try:
        return cls(**raw)
    except TreeLabelError as e:
        raise ConfigError(f"{name}: {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: bad value ({e})") from e


def _as_int(where: str, value) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    try:
        return int(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where} must be an integer, got {value!r}") from e


def from_dict(raw: Dict[str, Any], seed: Optional[int] = None) -> RunConfig:
    _check_keys("config", raw, TOP_LEVEL)
    for name, cls in SECTIONS.items():
        _check_keys(name, raw.get(name, {}), _field_names(cls))
    levels = raw.get("encoder", {}).get("point_levels", []) or []
    if not isinstance(levels, list):
        raise ConfigError(f"encoder.point_levels must be a list, got {type(levels).__name__}")
    for i, level in enumerate(levels):
        _check_keys(f"encoder.point_levels[{i}]", level, _field_names(SALevelConfig))

    run_seed = _as_int("seed", raw.get("seed", 0) if seed is None else seed)
    num_classes = _as_int("num_classes", raw.get("num_classes", 8))
    if not 2 <= num_classes <= 255:
        raise ConfigError(f"num_classes must lie in 2..255, got {num_classes}")

    # the global seed and class count flow into every section
    sections = {name: dict(raw.get(name, {})) for name in SECTIONS}
    for name, key in (("synth", "num_classes"), ("fusion", "num_classes"), ("eval", "num_classes")):
        given = sections[name].get(key)
        if given is not None and _as_int(f"{name}.{key}", given) != num_classes:
            raise ConfigError(f"{name}.{key}={given} disagrees with num_classes={num_classes}")
        sections[name][key] = num_classes
    sections["synth"]["seed"] = run_seed
    sections["train"]["seed"] = run_seed

    built = {name: _build(name, cls, sections[name]) for name, cls in SECTIONS.items()}
    cfg = RunConfig(seed=run_seed, num_classes=num_classes, **built)
    if cfg.encoder.out_width != cfg.fusion.width:
        raise ConfigError(
            f"encoder.out_width={cfg.encoder.out_width} must equal fusion.width={cfg.fusion.width}"
        )
    return cfg


def load_run_config(path: Optional[PathLike] = None, seed: Optional[int] = None) -> RunConfig:
    if path is None:
        return from_dict({}, seed)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    cfg = from_dict(raw, seed)
    logger.debug(f"Loaded run config {path} seed={cfg.seed} classes={cfg.num_classes}")
    return cfg
