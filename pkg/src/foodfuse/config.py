"""Run configuration: one YAML file is the source of truth.

Only paths and the seed may be overridden from the environment
(``FOODFUSE_SEED``, ``FOODFUSE_DATA_DIR``, ``FOODFUSE_CHECKPOINT``,
``FOODFUSE_REPORT_DIR``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .codec import LatentCodecConfig
from .diffusion import SamplerConfig
from .forge import ForgeConfig
from .fusion import FusionEncoderConfig
from .model import DiffusionConfig, ModelConfig
from .training import TrainConfig
from .unet import UNetConfig


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    checkpoint: str = "runs/model.ffck"
    report_dir: str = "runs/report"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    image_size: int = 64
    forge: ForgeConfig = field(default_factory=ForgeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    fusion: FusionEncoderConfig = field(default_factory=FusionEncoderConfig)
    codec: LatentCodecConfig = field(default_factory=LatentCodecConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.image_size, self.codec, self.fusion, self.unet, self.diffusion, self.seed)

    def forge_config(self) -> ForgeConfig:
        return dataclasses.replace(self.forge, image_size=self.image_size, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def sampler_config(self) -> SamplerConfig:
        return dataclasses.replace(self.sampler, seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        payload = self.to_dict()
        payload.pop("paths")
        return hashlib.sha256(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def validate(self) -> RunConfig:
        sections = [("forge", self.forge_config()), ("train", self.train), ("codec", self.codec),
                    ("fusion", self.fusion), ("unet", self.unet)]
        for name, section in sections:
            try:
                section.validate()
            except ValueError as exc:
                raise ConfigError(name, str(exc)) from exc
        try:
            self.diffusion.schedule()
        except ValueError as exc:
            raise ConfigError("diffusion", str(exc)) from exc
        try:
            self.sampler.validate(self.diffusion.T)
        except ValueError as exc:
            raise ConfigError("sampler", str(exc)) from exc
        if self.image_size % self.codec.factor:
            raise ConfigError("image_size", f"{self.image_size} not divisible by codec.factor={self.codec.factor}")
        if self.image_size % self.fusion.patch_size:
            raise ConfigError("image_size", f"{self.image_size} not divisible by fusion.patch_size={self.fusion.patch_size}")
        latent = self.image_size // self.codec.factor
        if latent % (2 ** (self.unet.levels - 1)):
            raise ConfigError("image_size", f"latent extent {latent} not divisible by 2^(levels-1)")
        if self.unet.latent_channels != self.codec.latent_channels:
            raise ConfigError("unet.latent_channels", "must equal codec.latent_channels")
        return self


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if value is None else _coerce(args[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(where, f"expected a list, got {value!r}")
        args = typing.get_args(tp)
        elem = args[0]
        return tuple(_coerce(elem, v, where) for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(where, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(where, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(where, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        return str(value)
    return value


def from_dict(cls, data: dict | None, where: str = ""):
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError(where or cls.__name__, "expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}.{sorted(unknown)[0]}".lstrip("."), "unknown key")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}".lstrip(".")) for k, v in data.items()}
    return cls(**kwargs)


ENV_PATHS = {"FOODFUSE_DATA_DIR": "data_dir", "FOODFUSE_CHECKPOINT": "checkpoint", "FOODFUSE_REPORT_DIR": "report_dir"}


def load_config(path: str | Path | None = None, env: dict[str, str] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(str(path), f"not valid YAML: {exc}") from exc
    env = os.environ if env is None else env
    if "FOODFUSE_SEED" in env:
        try:
            raw["seed"] = int(env["FOODFUSE_SEED"])
        except ValueError as exc:
            raise ConfigError("FOODFUSE_SEED", "must be an integer") from exc
    for var, key in ENV_PATHS.items():
        if var in env:
            raw.setdefault("paths", {})[key] = env[var]
    return from_dict(RunConfig, raw).validate()


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), sort_keys=True)
