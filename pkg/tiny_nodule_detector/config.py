"""
TOML configuration files.

A run config has top-level `seed`, `profile` and `variant` keys and the sections
[scene], [augment], [model], [train] and [eval], each mapping onto the dataclass of
the same concern. Values layer as dataclass defaults < config file < command-line
flags; unknown keys are rejected.
"""
import hashlib
import json
import logging
import tomllib
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Type, TypeVar, Union

from . import Profile, Variant
from .data import AugmentConfig, SceneSpec
from .detector import ModelConfig
from .exceptions import ConfigError
from .training import EvalConfig, TrainConfig

logger = logging.getLogger(__name__)

T = TypeVar("T")

SECTIONS = ("scene", "augment", "model", "train", "eval")


def read_toml(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        with open(path, "rb") as handle:
            return tomllib.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"Config file {path} does not exist") from None
    except tomllib.TOMLDecodeError as error:
        raise ConfigError(f"{path}: {error}") from None


def build_dataclass(cls: Type[T], values: Mapping[str, Any], section: str, base: Optional[T] = None) -> T:
    """Instantiate `cls` (or update `base`) from a mapping, turning lists into tuples."""
    names = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"Unknown key(s) in [{section}]: {', '.join(unknown)}")
    converted = {key: tuple(value) if isinstance(value, list) else value for key, value in values.items()}
    try:
        return replace(base, **converted) if base is not None else cls(**converted)
    except (TypeError, ValueError) as error:
        raise ConfigError(f"Invalid value in [{section}]: {error}") from None


@dataclass
class RunConfig:
    seed: int = 0
    profile: Profile = Profile.DESK
    variant: Variant = Variant.FULL
    scene: SceneSpec = field(default_factory=SceneSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def as_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form of the resolved config."""
        text = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if is_dataclass(value):
        return _plain(asdict(value))
    return value


def _merge(base: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def load_run_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """
    Resolve a RunConfig from an optional TOML file and flag overrides.

    `overrides` has the file's shape: top-level keys plus per-section mappings. A
    top-level seed seeds both scene generation and training.
    """
    data = read_toml(path) if path is not None else {}
    data = _merge(data, {k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(data) - {"seed", "profile", "variant", *SECTIONS})
    if unknown:
        raise ConfigError(f"Unknown top-level key(s): {', '.join(unknown)}")
    for section in SECTIONS:
        if not isinstance(data.get(section, {}), Mapping):
            raise ConfigError(f"[{section}] must be a table")

    try:
        profile = Profile(data.get("profile", Profile.DESK))
        variant = Variant(data.get("variant", Variant.FULL))
    except ValueError as error:
        raise ConfigError(str(error)) from None
    model = build_dataclass(ModelConfig, data.get("model", {}), "model", base=ModelConfig.for_profile(profile))
    if "variant" in data:
        model = model.with_variant(variant)
    scene = build_dataclass(SceneSpec, data.get("scene", {}), "scene")
    train = build_dataclass(TrainConfig, data.get("train", {}), "train")
    if "seed" in data:
        seed = int(data["seed"])
        scene, train = replace(scene, seed=seed), replace(train, seed=seed)
    config = RunConfig(
        seed=train.seed,
        profile=profile,
        variant=variant,
        scene=scene,
        augment=build_dataclass(AugmentConfig, data.get("augment", {}), "augment"),
        model=model,
        train=train,
        eval=build_dataclass(EvalConfig, data.get("eval", {}), "eval"),
    )
    logger.debug(f"Resolved config {config.digest()[:12]} from {path or 'defaults'}")
    return config
