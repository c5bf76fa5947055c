"""Requirements, reward components, weighted composition, magnitude probing.

Each user requirement is a numeric pass/fail condition over episode metrics
and owns exactly one reward component (a DSL program). The total training
reward is the weighted sum of component values; weights are what the search
stage tunes. Probing runs a random policy to estimate per-component value
magnitudes so initial weights can put every component on a comparable scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import rdsl, world as world_mod
from .world import EpisodeMetrics, WorldConfig

__all__ = [
    "Requirement",
    "RewardComponent",
    "MagnitudeReport",
    "ComponentError",
    "COMPONENT_ORDER",
    "REQUIREMENT_FOR_COMPONENT",
    "COMPONENT_FOR_REQUIREMENT",
    "default_requirements",
    "reference_components",
    "compose",
    "WeightedReward",
    "probe_values",
    "check_requirement",
]

# Component ids map 1:1 to requirement ids; the component id doubles as the
# weight key everywhere downstream.
COMPONENT_FOR_REQUIREMENT = {
    "no_collision": "w_col",
    "no_border": "w_border",
    "overflow": "w_service",
    "energy": "w_ec",
}
REQUIREMENT_FOR_COMPONENT = {v: k for k, v in COMPONENT_FOR_REQUIREMENT.items()}
COMPONENT_ORDER = ("w_col", "w_border", "w_service", "w_ec")

_COMPARATORS = ("<=", ">=", "==")


class ComponentError(ValueError):
    """A component failed evaluation or registry validation."""


@dataclass(frozen=True)
class Requirement:
    id: str
    kind: str  # safety | performance | objective
    metric: str  # EpisodeMetrics field name
    comparator: str  # <= | >= | ==
    threshold: float

    def validate(self) -> None:
        if self.comparator not in _COMPARATORS:
            raise ValueError(f"requirement {self.id}: unknown comparator {self.comparator!r}")
        if not math.isfinite(self.threshold):
            raise ValueError(f"requirement {self.id}: threshold must be finite")
        if self.metric not in EpisodeMetrics(0, 0, 0, 0, 0).as_dict():
            raise ValueError(f"requirement {self.id}: unknown metric {self.metric!r}")


@dataclass(frozen=True)
class RewardComponent:
    id: str
    requirement_id: str
    program: rdsl.RewardProgram


@dataclass(frozen=True)
class MagnitudeReport:
    """Per-step |value| statistics per component under a random policy."""

    stats: dict[str, dict[str, float]]  # id -> {mean_abs, std, min, max}
    episodes: int
    steps_per_episode: int
    seed: int

    def mean_abs(self, component_id: str) -> float:
        return self.stats[component_id]["mean_abs"]

    def as_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "steps_per_episode": self.steps_per_episode,
            "seed": self.seed,
            "stats": self.stats,
        }


def default_requirements(config: WorldConfig) -> dict[str, Requirement]:
    """Safety events forbidden outright; overflow and energy get numeric slack.

    The energy budget is 70% of what the fleet would burn holding top speed
    for the whole episode, so staying mostly still passes and constant
    full-speed motion fails.
    """
    budget = 0.7 * world_mod.full_speed_energy(config)
    reqs = {
        "no_collision": Requirement("no_collision", "safety", "total_collisions", "==", 0.0),
        "no_border": Requirement("no_border", "safety", "total_border_hits", "==", 0.0),
        "overflow": Requirement("overflow", "performance", "overflow_per_node", "<=", 2.0),
        "energy": Requirement("energy", "objective", "total_energy", "<=", budget),
    }
    for r in reqs.values():
        r.validate()
    return reqs


_REFERENCE_SOURCES = {
    "w_col": (
        "-max(0, 2*collision_dist - d_min_auv)/(2*collision_dist)"
        " + if(collided > 0, -1, 0)"
    ),
    "w_border": (
        "-max(0, border_margin - d_border)/border_margin"
        " + if(crossed > 0, -1, 0)"
    ),
    "w_service": "served*10 - b_max - d_target/20 + if(overflowed > 0, -1, 0)",
    "w_ec": "-e_step/e_ref",
}


def reference_components() -> dict[str, RewardComponent]:
    """Built-in hand-written components, one per requirement.

    Each pairs a dense guidance term with a sparse event penalty so training
    gets gradient signal before the first rare event.
    """
    out = {}
    for cid in COMPONENT_ORDER:
        out[cid] = RewardComponent(
            id=cid,
            requirement_id=REQUIREMENT_FOR_COMPONENT[cid],
            program=rdsl.parse(_REFERENCE_SOURCES[cid]),
        )
    return out


def validate_registry(
    components: Mapping[str, RewardComponent],
    requirements: Mapping[str, Requirement],
    schema: Sequence[str],
) -> None:
    """Exactly one component per requirement, all programs check cleanly."""
    comp_reqs = sorted(c.requirement_id for c in components.values())
    if comp_reqs != sorted(requirements):
        raise ComponentError(
            f"component/requirement mismatch: components cover {comp_reqs}, requirements are {sorted(requirements)}"
        )
    for cid, comp in components.items():
        if cid != comp.id:
            raise ComponentError(f"component registered under {cid!r} but carries id {comp.id!r}")
        missing = rdsl.check(comp.program, schema)
        if missing:
            raise ComponentError(f"component {cid}: unresolved names {sorted(missing)}")


def compose(weights: Mapping[str, float], values: Mapping[str, float]) -> float:
    if set(weights) != set(values):
        raise ComponentError(
            f"weight keys {sorted(weights)} do not match value keys {sorted(values)}"
        )
    for key, w in weights.items():
        if not (math.isfinite(w) and w > 0):
            raise ComponentError(f"weight {key} must be positive and finite, got {w!r}")
    return float(sum(weights[k] * values[k] for k in weights))


class WeightedReward:
    """Callable total reward: weighted sum of compiled component programs."""

    def __init__(self, components: Mapping[str, RewardComponent], weights: Mapping[str, float]):
        if set(components) != set(weights):
            raise ComponentError(
                f"component ids {sorted(components)} do not match weight keys {sorted(weights)}"
            )
        for key, w in weights.items():
            if not (math.isfinite(w) and w > 0):
                raise ComponentError(f"weight {key} must be positive and finite, got {w!r}")
        self.ids = [cid for cid in COMPONENT_ORDER if cid in components]
        self.ids += sorted(set(components) - set(self.ids))
        self.weights = {cid: float(weights[cid]) for cid in self.ids}
        self._fns = {cid: rdsl.compile_program(components[cid].program) for cid in self.ids}

    def per_component(self, bindings: Mapping[str, float]) -> dict[str, float]:
        values = {}
        for cid in self.ids:
            try:
                values[cid] = self._fns[cid](bindings)
            except rdsl.EvalError as err:
                raise rdsl.EvalError(err.kind, f"component {cid}: {err.message}", err.line, err.col) from None
        return values

    def compose_values(self, values: Mapping[str, float]) -> float:
        return float(sum(self.weights[cid] * values[cid] for cid in self.ids))

    def __call__(self, bindings: Mapping[str, float]) -> float:
        return self.compose_values(self.per_component(bindings))


def random_policy(rng: np.random.Generator, n_actions: int):
    def policy(obs_vec: np.ndarray) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, n_actions)

    return policy


def probe_values(
    config: WorldConfig,
    components: Mapping[str, RewardComponent],
    episodes: int = 30,
    seed: int = 0,
) -> MagnitudeReport:
    """Estimate per-step component magnitudes under uniform random actions.

    30 episodes keeps the estimate of rare-event components (collision
    proximity) within about 2x across independent probes; fewer episodes
    leave it too noisy to balance against.
    """
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    fns = {cid: rdsl.compile_program(comp.program) for cid, comp in components.items()}
    samples: dict[str, list[float]] = {cid: [] for cid in components}
    n_act = world_mod.action_dim(config)
    for ep in range(episodes):
        rng = np.random.default_rng([seed, ep])
        records, _, _ = world_mod.run_episode(config, seed=ep, policy=random_policy(rng, n_act))
        for rec in records:
            for cid, fn in fns.items():
                try:
                    samples[cid].append(fn(rec.obs))
                except rdsl.EvalError as err:
                    raise ComponentError(f"component {cid} failed at probe: {err}") from err
    stats = {}
    for cid, vals in samples.items():
        arr = np.abs(np.asarray(vals, dtype=np.float64))
        stats[cid] = {
            "mean_abs": float(arr.mean()),
            "std": float(arr.std()),
            "min": float(arr.min()),
            "max": float(arr.max()),
        }
    return MagnitudeReport(
        stats=stats,
        episodes=episodes,
        steps_per_episode=config.episode_len,
        seed=seed,
    )


def check_requirement(metrics: EpisodeMetrics | Mapping[str, float], req: Requirement) -> tuple[str, float]:
    """Verdict plus signed margin (positive = satisfied with slack)."""
    table = metrics.as_dict() if isinstance(metrics, EpisodeMetrics) else dict(metrics)
    if req.metric not in table:
        raise ValueError(f"unknown metric {req.metric!r} for requirement {req.id}")
    value = float(table[req.metric])
    if req.comparator == "<=":
        margin = req.threshold - value
    elif req.comparator == ">=":
        margin = value - req.threshold
    else:
        margin = -abs(value - req.threshold)
    margin += 0.0  # normalize -0.0
    verdict = "YES" if margin >= 0.0 else "NO"
    return verdict, margin
