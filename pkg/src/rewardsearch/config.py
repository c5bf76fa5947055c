"""Run configuration: JSON in, validated dataclasses out.

Every validation failure names the offending field path so a bad config is
diagnosable from the error message alone.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

from .rewards import (
    COMPONENT_FOR_REQUIREMENT,
    REQUIREMENT_FOR_COMPONENT,
    Requirement,
    default_requirements,
)
from .td3 import TD3Config
from .world import WorldConfig, WorldConfigError

__all__ = [
    "ConfigError",
    "SearchSettings",
    "BackendSettings",
    "RunConfig",
    "load_config",
    "config_from_dict",
]

STRATEGIES = ("erfsl", "naive")
BACKEND_KINDS = ("scripted", "http", "replay", "none")


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending field."""


@dataclass(frozen=True)
class SearchSettings:
    k: int = 5
    max_iters: int = 10
    strategy: str = "erfsl"
    target_scale: float = 1.0
    probe_episodes: int = 30
    critic_rounds: int = 1
    initial_multipliers: dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        if not isinstance(self.k, int) or self.k < 1:
            raise ConfigError(f"search.k must be an integer >= 1, got {self.k!r}")
        if not isinstance(self.max_iters, int) or self.max_iters < 0:
            raise ConfigError(f"search.max_iters must be an integer >= 0, got {self.max_iters!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"search.strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not (isinstance(self.target_scale, (int, float)) and math.isfinite(self.target_scale)
                and self.target_scale > 0):
            raise ConfigError(f"search.target_scale must be positive, got {self.target_scale!r}")
        if not isinstance(self.probe_episodes, int) or self.probe_episodes < 1:
            raise ConfigError(f"search.probe_episodes must be an integer >= 1, got {self.probe_episodes!r}")
        if not isinstance(self.critic_rounds, int) or self.critic_rounds < 0:
            raise ConfigError(f"search.critic_rounds must be an integer >= 0, got {self.critic_rounds!r}")
        for name, factor in self.initial_multipliers.items():
            if not (isinstance(factor, (int, float)) and math.isfinite(factor) and factor > 0):
                raise ConfigError(f"search.initial_multipliers.{name} must be positive, got {factor!r}")


@dataclass(frozen=True)
class BackendSettings:
    kind: str = "scripted"
    base_url: str = ""
    model: str = ""
    api_key_env: str = "REWARDSEARCH_API_KEY"
    transcript_path: str = ""  # replay source
    timeout_s: float = 60.0

    def validate(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"backend.kind must be one of {BACKEND_KINDS}, got {self.kind!r}")
        if self.kind == "http":
            if not self.base_url:
                raise ConfigError("backend.base_url is required for the http backend")
            if not self.model:
                raise ConfigError("backend.model is required for the http backend")
        if self.kind == "replay" and not self.transcript_path:
            raise ConfigError("backend.transcript_path is required for the replay backend")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: str
    world: WorldConfig
    requirements: dict[str, Requirement]
    td3: TD3Config
    search: SearchSettings
    backend: BackendSettings
    components: dict[str, dict] | None = None  # id -> {"requirement": rid, "source": text}

    def validate(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if not self.out_dir or not isinstance(self.out_dir, str):
            raise ConfigError(f"out_dir must be a non-empty string, got {self.out_dir!r}")
        try:
            self.world.validate()
        except WorldConfigError as err:
            raise ConfigError(f"world.{err}") from None
        for rid, req in self.requirements.items():
            if rid != req.id:
                raise ConfigError(f"requirements entry {rid!r} carries id {req.id!r}")
            try:
                req.validate()
            except ValueError as err:
                raise ConfigError(f"requirements.{rid}: {err}") from None
        try:
            self.td3.validate()
        except ValueError as err:
            raise ConfigError(f"td3: {err}") from None
        self.search.validate()
        self.backend.validate()
        if self.components is not None:
            covered = []
            for cid, entry in self.components.items():
                rid = entry.get("requirement")
                if rid not in self.requirements:
                    raise ConfigError(
                        f"components.{cid} references unknown requirement {rid!r}"
                    )
                if not entry.get("source"):
                    raise ConfigError(f"components.{cid} has no source")
                covered.append(rid)
            if sorted(covered) != sorted(self.requirements):
                raise ConfigError(
                    f"components must cover every requirement exactly once: "
                    f"components cover {sorted(covered)}, requirements are {sorted(self.requirements)}"
                )
        for name in self.search.initial_multipliers:
            if self.components is not None and name not in self.components:
                raise ConfigError(
                    f"search.initial_multipliers.{name} does not match any component id"
                )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "world": dataclasses.asdict(self.world),
            "requirements": [
                dataclasses.asdict(self.requirements[rid]) for rid in sorted(self.requirements)
            ],
            "td3": dataclasses.asdict(self.td3),
            "search": dataclasses.asdict(self.search),
            "backend": dataclasses.asdict(self.backend),
            "components": self.components,
        }


def _coerce(value):
    if isinstance(value, list):
        return tuple(_coerce(v) for v in value)
    return value


def _build_dataclass(cls, defaults, overrides: Mapping, section: str):
    if not isinstance(overrides, Mapping):
        raise ConfigError(f"{section} must be an object, got {type(overrides).__name__}")
    valid = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in overrides.items():
        if key not in valid:
            raise ConfigError(f"{section}.{key} is not a recognized field")
        kwargs[key] = _coerce(value)
    return dataclasses.replace(defaults, **kwargs)


def _parse_requirements(raw, world: WorldConfig) -> dict[str, Requirement]:
    if raw is None:
        return default_requirements(world)
    if not isinstance(raw, list):
        raise ConfigError("requirements must be a list of objects")
    out: dict[str, Requirement] = {}
    for i, entry in enumerate(raw):
        if not isinstance(entry, Mapping):
            raise ConfigError(f"requirements[{i}] must be an object")
        missing = {"id", "kind", "metric", "comparator", "threshold"} - set(entry)
        if missing:
            raise ConfigError(f"requirements[{i}] missing fields {sorted(missing)}")
        req = Requirement(
            id=entry["id"],
            kind=entry["kind"],
            metric=entry["metric"],
            comparator=entry["comparator"],
            threshold=float(entry["threshold"]),
        )
        if req.id in out:
            raise ConfigError(f"requirements[{i}] duplicates id {req.id!r}")
        out[req.id] = req
    return out


def _parse_components(raw, requirements: dict[str, Requirement]):
    if raw is None:
        return None
    if not isinstance(raw, Mapping):
        raise ConfigError("components must be an object mapping component id to source")
    out: dict[str, dict] = {}
    for cid, entry in raw.items():
        if isinstance(entry, str):
            rid = REQUIREMENT_FOR_COMPONENT.get(cid)
            if rid is None:
                raise ConfigError(
                    f"components.{cid} is a bare source string but {cid!r} has no default "
                    "requirement mapping; use {\"requirement\": ..., \"source\": ...}"
                )
            out[cid] = {"requirement": rid, "source": entry}
        elif isinstance(entry, Mapping):
            out[cid] = {"requirement": entry.get("requirement"), "source": entry.get("source")}
        else:
            raise ConfigError(f"components.{cid} must be a source string or an object")
    return out


def config_from_dict(data: Mapping) -> RunConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("top-level config must be a JSON object")
    known = {"seed", "out_dir", "world", "requirements", "td3", "search", "backend", "components"}
    for key in data:
        if key not in known:
            raise ConfigError(f"{key} is not a recognized config section")
    if "seed" not in data:
        raise ConfigError("seed is mandatory")
    if "out_dir" not in data:
        raise ConfigError("out_dir is mandatory")
    world = _build_dataclass(WorldConfig, WorldConfig(), data.get("world", {}), "world")
    requirements = _parse_requirements(data.get("requirements"), world)
    cfg = RunConfig(
        seed=data["seed"],
        out_dir=data["out_dir"],
        world=world,
        requirements=requirements,
        td3=_build_dataclass(TD3Config, TD3Config(), data.get("td3", {}), "td3"),
        search=_build_dataclass(SearchSettings, SearchSettings(), data.get("search", {}), "search"),
        backend=_build_dataclass(BackendSettings, BackendSettings(), data.get("backend", {}), "backend"),
        components=_parse_components(data.get("components"), requirements),
    )
    cfg.validate()
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file is not valid JSON: {err}") from None
    return config_from_dict(data)
