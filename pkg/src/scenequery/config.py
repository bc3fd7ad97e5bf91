"""Run configuration: defaults, config-file loading, and flag overrides."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .scenegraph import AssocConfig
from .superpoints import MergeConfig

PROVIDERS = ("mock", "oracle", "http")
SECRET_FIELDS = {"api_key"}


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit code 2."""


@dataclass
class RunConfig:
    provider: str = "oracle"
    tau_iou: float = 0.9
    tau_sim: float = 0.9
    top_k_views: int = 5
    z_tolerance: float = 0.05
    graphcut_k: int = 10
    graphcut_kappa: float = 0.08
    voxel_size: float = 0.025
    nn_threshold: float = 0.025
    assoc_threshold: float = 1.1
    node_cap: int = 200
    embed_dim: int = 64
    seed: int = 7
    jobs: int = 1
    verbosity: int = 0
    api_base: Optional[str] = None
    api_key: Optional[str] = None
    model: Optional[str] = None
    fixture: Optional[str] = None
    cache_dir: str = ".scenequery-cache"

    def validate(self) -> "RunConfig":
        if self.provider not in PROVIDERS:
            raise ConfigError(f"provider must be one of {PROVIDERS}, got {self.provider!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if self.node_cap < 1 or self.embed_dim < 1:
            raise ConfigError("node_cap and embed_dim must be positive")
        if self.fixture is not None and not Path(self.fixture).exists():
            raise ConfigError(f"fixture file {self.fixture} does not exist")
        try:
            self.merge_config()
            self.assoc_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def merge_config(self) -> MergeConfig:
        return MergeConfig(self.tau_iou, self.tau_sim, self.top_k_views, self.z_tolerance, self.graphcut_k,
                           self.graphcut_kappa)

    def assoc_config(self) -> AssocConfig:
        return AssocConfig(self.voxel_size, self.nn_threshold, self.assoc_threshold)

    def echo(self) -> dict:
        """Effective configuration for output artifacts, with secrets removed."""
        return {k: v for k, v in asdict(self).items() if k not in SECRET_FIELDS}

    @classmethod
    def from_sources(cls, path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        """Defaults, then the config file, then non-None ``overrides`` (command-line flags win)."""
        values: dict[str, Any] = {}
        if path is not None:
            values.update(load_config_file(path))
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls()
        for key, value in values.items():
            default = getattr(cfg, key)
            if default is not None and not isinstance(value, type(default)):
                try:
                    value = type(default)(value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"config key {key!r}: cannot use {value!r}") from exc
            setattr(cfg, key, value)
        return cfg.validate()


def load_config_file(path: str) -> dict:
    """Flat ``key = value`` TOML file."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        doc = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    nested = [k for k, v in doc.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: config must be flat, found tables {nested}")
    return doc
