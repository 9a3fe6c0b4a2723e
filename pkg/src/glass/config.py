"""Run configuration: TOML sections ``[vae]``, ``[explorer]``, ``[pipeline]``,
``[paths]`` plus a top-level ``seed``."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .explorer import PerturbationParams


class ConfigError(ValueError):
    pass


@dataclass
class VaeConfig:
    latent_dim: int = 8
    encoder_hidden: list = field(default_factory=lambda: [256, 128])
    decoder_hidden: list = field(default_factory=lambda: [128, 256])
    lr: float = 1e-3
    batch_size: int = 16
    sigma: float = 1.0
    clip_norm: float = 10.0
    # "rest": deformation loss w.r.t. the rest mesh; "self": w.r.t. each training shape
    deformation_base: str = "rest"
    # "per-sample": penalise each predicted (mu, var); "batch": match mini-batch moments of z
    gaussian: str = "per-sample"

    def __post_init__(self):
        if self.deformation_base not in ("rest", "self"):
            raise ValueError(f"unknown deformation_base {self.deformation_base!r}")
        if self.gaussian not in ("per-sample", "batch"):
            raise ValueError(f"unknown gaussian form {self.gaussian!r}")


@dataclass
class PipelineConfig:
    epochs_initial: int = 200
    epochs_per_round: int = 200
    augmentations_per_round: int = 0  # 0 means one per landmark
    target_set_size: int = 50
    max_rounds: int = 1000
    warm_start: bool = True
    exclude_nonconverged: bool = False
    checkpoint: bool = True


@dataclass
class PathsConfig:
    rest: str = ""
    landmarks: list = field(default_factory=list)
    out: str = "run"


@dataclass
class RunConfig:
    seed: int = 0
    vae: VaeConfig = field(default_factory=VaeConfig)
    explorer: PerturbationParams = field(default_factory=PerturbationParams)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        sections = {"vae": VaeConfig, "explorer": PerturbationParams, "pipeline": PipelineConfig,
                    "paths": PathsConfig}
        kwargs = {}
        for key, val in d.items():
            if key == "seed":
                kwargs["seed"] = int(val)
            elif key in sections:
                if not isinstance(val, dict):
                    raise ConfigError(f"[{key}] must be a table")
                kwargs[key] = _build(sections[key], val, key)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "rb") as fh:
            try:
                d = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d)

    def with_overrides(self, overrides) -> "RunConfig":
        """Apply ``section.key=value`` strings; values are parsed as TOML literals."""
        d = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            parts = key.strip().lstrip("-").split(".")
            value = _parse_value(raw.strip())
            node = d
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)


def _parse_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def _build(klass, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(klass)}
    for k in values:
        if k not in names:
            raise ConfigError(f"unknown config key {section}.{k}")
    try:
        return klass(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc
