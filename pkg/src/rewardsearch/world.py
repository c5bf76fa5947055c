"""Deterministic 2-D multi-AUV data-collection simulator.

A handful of autonomous underwater vehicles move in a square arena dotted
with stationary sensor nodes. Each node accumulates data into a normalized
buffer; an AUV within communication radius drains it. The simulator counts
safety events (AUV-pair collisions, border exits), data overflow at full
buffers, and propulsion energy, and exposes a named scalar observation map
that both the reward language and the policy consume.

Everything is plain float64 arithmetic with no hidden randomness: the same
config, seed, and action trace reproduce the same step records bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "WorldConfig",
    "WorldConfigError",
    "WorldState",
    "StepRecord",
    "EpisodeMetrics",
    "init_world",
    "observe",
    "step",
    "run_episode",
    "binding_names",
    "policy_feature_names",
    "flatten_obs",
    "constant_bindings",
    "energy_reference",
    "full_speed_energy",
]

# Buffers are compared against the cap with this slack so that repeated
# float additions of a fill rate cannot spuriously read as "at capacity"
# one step early.
_CAP_EPS = 1e-12

# One ring of six nodes, radius 5 around (72, 50): every node sits within
# comm radius of the ring center, so a single AUV parked there keeps all
# buffers drained, while a policy that never approaches the ring overflows
# most nodes well before the episode ends.
_DEFAULT_SN = (
    (77.0, 50.0),
    (74.5, 54.33),
    (69.5, 54.33),
    (67.0, 50.0),
    (69.5, 45.67),
    (74.5, 45.67),
)
_DEFAULT_FILL = (0.012, 0.0088, 0.0056, 0.0104, 0.0072, 0.004)
# Spawn points sit west of the ring, outside comm radius of every node,
# close enough together that the pair starts inside the collision component's
# dense zone (2x collision_dist): a random-action probe then samples that
# term every episode instead of almost never, which keeps its magnitude
# estimate stable — but far enough apart that sitting still is collision-free.
_DEFAULT_SPAWN = ((44.0, 50.0), (56.0, 50.0))
_DEFAULT_HEADINGS = (1.5707963267948966, 1.5707963267948966)  # both facing +y


class WorldConfigError(ValueError):
    """Invalid world configuration; message names the offending field."""


@dataclass(frozen=True)
class WorldConfig:
    arena_side: float = 100.0
    n_auv: int = 2
    n_sn: int = 6
    sn_positions: tuple[tuple[float, float], ...] = _DEFAULT_SN
    fill_rates: tuple[float, ...] = _DEFAULT_FILL
    buffer_cap: float = 1.0
    comm_radius: float = 10.0
    drain_rate: float = 0.05
    v_max: float = 2.0
    turn_max: float = 0.3
    # wide separation requirement: the dense penalty zone (2x this) then
    # covers the spawn gap, which both teaches early avoidance and keeps the
    # probe estimate of the collision term well away from zero
    collision_dist: float = 8.0
    border_margin: float = 8.0
    energy_hotel: float = 1.0
    energy_prop_coeff: float = 0.5
    episode_len: int = 200
    dt: float = 1.0
    spawn_points: tuple[tuple[float, float], ...] = _DEFAULT_SPAWN
    spawn_headings: tuple[float, ...] = _DEFAULT_HEADINGS

    def validate(self) -> None:
        pos_fields = (
            "arena_side",
            "buffer_cap",
            "comm_radius",
            "drain_rate",
            "v_max",
            "turn_max",
            "collision_dist",
            "border_margin",
            "energy_hotel",
            "energy_prop_coeff",
            "dt",
        )
        for name in pos_fields:
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise WorldConfigError(f"{name} must be a positive finite number, got {value!r}")
        if self.n_auv < 2:
            raise WorldConfigError(f"n_auv must be >= 2, got {self.n_auv}")
        if self.n_sn < 1:
            raise WorldConfigError(f"n_sn must be >= 1, got {self.n_sn}")
        if self.episode_len < 1:
            raise WorldConfigError(f"episode_len must be >= 1, got {self.episode_len}")
        if self.collision_dist >= self.comm_radius:
            raise WorldConfigError(
                f"collision_dist ({self.collision_dist}) must be < comm_radius ({self.comm_radius})"
            )
        if len(self.sn_positions) != self.n_sn:
            raise WorldConfigError(
                f"sn_positions has {len(self.sn_positions)} entries, n_sn is {self.n_sn}"
            )
        if len(self.fill_rates) != self.n_sn:
            raise WorldConfigError(
                f"fill_rates has {len(self.fill_rates)} entries, n_sn is {self.n_sn}"
            )
        for j, rate in enumerate(self.fill_rates):
            if not (math.isfinite(rate) and rate > 0):
                raise WorldConfigError(f"fill_rates[{j}] must be positive, got {rate!r}")
        for j, (x, y) in enumerate(self.sn_positions):
            if not (0.0 <= x <= self.arena_side and 0.0 <= y <= self.arena_side):
                raise WorldConfigError(f"sn_positions[{j}] outside arena")
        if len(self.spawn_points) != self.n_auv:
            raise WorldConfigError(
                f"spawn_points has {len(self.spawn_points)} entries, n_auv is {self.n_auv}"
            )
        for i, (x, y) in enumerate(self.spawn_points):
            if not (0.0 <= x <= self.arena_side and 0.0 <= y <= self.arena_side):
                raise WorldConfigError(f"spawn_points[{i}] outside arena")
        if len(self.spawn_headings) != self.n_auv:
            raise WorldConfigError(
                f"spawn_headings has {len(self.spawn_headings)} entries, n_auv is {self.n_auv}"
            )
        for i in range(self.n_auv):
            for j in range(i + 1, self.n_auv):
                dx = self.spawn_points[i][0] - self.spawn_points[j][0]
                dy = self.spawn_points[i][1] - self.spawn_points[j][1]
                if math.hypot(dx, dy) <= self.collision_dist:
                    raise WorldConfigError(f"spawn_points[{i}] and spawn_points[{j}] closer than collision_dist")


@dataclass
class WorldState:
    step_idx: int
    auv_pos: np.ndarray  # (n_auv, 2)
    auv_heading: np.ndarray  # (n_auv,)
    auv_speed: np.ndarray  # (n_auv,)
    sn_buffer: np.ndarray  # (n_sn,)
    rng: np.random.Generator

    def copy(self) -> "WorldState":
        return WorldState(
            step_idx=self.step_idx,
            auv_pos=self.auv_pos.copy(),
            auv_heading=self.auv_heading.copy(),
            auv_speed=self.auv_speed.copy(),
            sn_buffer=self.sn_buffer.copy(),
            rng=self.rng,
        )


@dataclass(frozen=True)
class StepRecord:
    collisions: int
    border_hits: int
    overflow_events: int
    served_data: float
    energy: float
    obs: dict[str, float]
    component_values: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class EpisodeMetrics:
    total_collisions: float
    total_border_hits: float
    overflow_per_node: float
    total_energy: float
    total_served: float
    return_per_component: dict[str, float] = field(default_factory=dict)

    @staticmethod
    def fold(records: Sequence[StepRecord], n_sn: int) -> "EpisodeMetrics":
        per_component: dict[str, float] = {}
        for rec in records:
            for name, value in rec.component_values.items():
                per_component[name] = per_component.get(name, 0.0) + value
        return EpisodeMetrics(
            total_collisions=float(sum(r.collisions for r in records)),
            total_border_hits=float(sum(r.border_hits for r in records)),
            overflow_per_node=float(sum(r.overflow_events for r in records)) / n_sn,
            total_energy=float(sum(r.energy for r in records)),
            total_served=float(sum(r.served_data for r in records)),
            return_per_component=per_component,
        )

    def as_dict(self) -> dict[str, float]:
        return {
            "total_collisions": self.total_collisions,
            "total_border_hits": self.total_border_hits,
            "overflow_per_node": self.overflow_per_node,
            "total_energy": self.total_energy,
            "total_served": self.total_served,
        }


def energy_reference(config: WorldConfig) -> float:
    """Energy of one full-speed step for the whole fleet; scales e_step to ~1."""
    return config.n_auv * (config.energy_hotel + config.energy_prop_coeff * config.v_max**3 * config.dt)


def full_speed_energy(config: WorldConfig) -> float:
    """Episode energy if every AUV held v_max for every step."""
    return config.episode_len * energy_reference(config)


def init_world(config: WorldConfig, seed: int) -> WorldState:
    config.validate()
    return WorldState(
        step_idx=0,
        auv_pos=np.asarray(config.spawn_points, dtype=np.float64).copy(),
        auv_heading=np.asarray(config.spawn_headings, dtype=np.float64).copy(),
        auv_speed=np.zeros(config.n_auv, dtype=np.float64),
        sn_buffer=np.zeros(config.n_sn, dtype=np.float64),
        rng=np.random.default_rng(seed),
    )


def constant_bindings(config: WorldConfig) -> dict[str, float]:
    """Config-derived names visible to reward programs alongside step scalars."""
    return {
        "arena_side": config.arena_side,
        "collision_dist": config.collision_dist,
        "border_margin": config.border_margin,
        "comm_radius": config.comm_radius,
        "v_max": config.v_max,
        "buffer_cap": config.buffer_cap,
        "dt": config.dt,
        "e_ref": energy_reference(config),
    }


def _target_node(buffers: np.ndarray) -> int:
    # argmax with ties broken by lowest index; np.argmax already does that
    return int(np.argmax(buffers))


def observe(
    state: WorldState,
    config: WorldConfig,
    *,
    collisions: int = 0,
    border_hits: int = 0,
    overflow_events: int = 0,
    served_data: float = 0.0,
    energy: float = 0.0,
) -> dict[str, float]:
    """Named scalar map for the current state plus the step's event fields.

    At reset the event fields are zero; after a step they describe what
    happened during that step.
    """
    pos = state.auv_pos
    sn = np.asarray(config.sn_positions, dtype=np.float64)

    d_min_auv = math.inf
    for i in range(config.n_auv):
        for j in range(i + 1, config.n_auv):
            d = math.hypot(pos[i, 0] - pos[j, 0], pos[i, 1] - pos[j, 1])
            d_min_auv = min(d_min_auv, d)

    wall = np.minimum(np.minimum(pos[:, 0], config.arena_side - pos[:, 0]),
                      np.minimum(pos[:, 1], config.arena_side - pos[:, 1]))

    target = _target_node(state.sn_buffer)
    tx, ty = float(sn[target, 0]), float(sn[target, 1])
    d_to_target = np.hypot(pos[:, 0] - tx, pos[:, 1] - ty)

    obs: dict[str, float] = {
        "d_min_auv": float(d_min_auv),
        "d_border": float(wall.min()),
        "b_max": float(state.sn_buffer.max()),
        "b_target": float(state.sn_buffer[target]),
        "d_target": float(d_to_target.min()),
        "served": float(served_data),
        "overflowed": 1.0 if overflow_events > 0 else 0.0,
        "collided": 1.0 if collisions > 0 else 0.0,
        "crossed": 1.0 if border_hits > 0 else 0.0,
        "e_step": float(energy),
    }
    for i in range(config.n_auv):
        h = float(state.auv_heading[i])
        tdx = tx - float(pos[i, 0])
        tdy = ty - float(pos[i, 1])
        # bearing to the target node in the vehicle frame; zero vector at the
        # node itself degrades to bearing 0 rather than NaN
        bearing = math.atan2(tdy, tdx) - h if (tdx or tdy) else 0.0
        obs[f"auv{i}_x"] = float(pos[i, 0])
        obs[f"auv{i}_y"] = float(pos[i, 1])
        obs[f"auv{i}_heading"] = h
        obs[f"auv{i}_speed"] = float(state.auv_speed[i])
        obs[f"auv{i}_hcos"] = math.cos(h)
        obs[f"auv{i}_hsin"] = math.sin(h)
        obs[f"auv{i}_d_border"] = float(wall[i])
        obs[f"auv{i}_tdx"] = tdx
        obs[f"auv{i}_tdy"] = tdy
        obs[f"auv{i}_tb_cos"] = math.cos(bearing)
        obs[f"auv{i}_tb_sin"] = math.sin(bearing)
        obs[f"auv{i}_d_target"] = math.hypot(tdx, tdy)
    for j in range(config.n_sn):
        obs[f"sn{j}_b"] = float(state.sn_buffer[j])
    obs.update(constant_bindings(config))
    return obs


def binding_names(config: WorldConfig) -> list[str]:
    """All observation names, in the order `observe` produces them."""
    state = init_world(config, 0)
    return list(observe(state, config).keys())


def policy_feature_names(config: WorldConfig) -> list[str]:
    """Flattened policy input: which binding feeds each vector slot.

    Values are normalized before stacking (positions and distances by
    arena_side, speed by v_max, buffers already in [0, cap]), so the name
    list states provenance, not raw equality.
    """
    names: list[str] = []
    for i in range(config.n_auv):
        names += [
            f"auv{i}_x",
            f"auv{i}_y",
            f"auv{i}_hcos",
            f"auv{i}_hsin",
            f"auv{i}_speed",
            f"auv{i}_d_border",
            f"auv{i}_tdx",
            f"auv{i}_tdy",
            f"auv{i}_tb_cos",
            f"auv{i}_tb_sin",
            f"auv{i}_d_target",
        ]
    names += [f"sn{j}_b" for j in range(config.n_sn)]
    names += ["d_min_auv", "d_target", "b_max"]
    return names


def flatten_obs(obs: Mapping[str, float], config: WorldConfig) -> np.ndarray:
    arena = config.arena_side
    out = np.empty(11 * config.n_auv + config.n_sn + 3, dtype=np.float64)
    k = 0
    for i in range(config.n_auv):
        out[k] = obs[f"auv{i}_x"] / arena
        out[k + 1] = obs[f"auv{i}_y"] / arena
        out[k + 2] = obs[f"auv{i}_hcos"]
        out[k + 3] = obs[f"auv{i}_hsin"]
        out[k + 4] = obs[f"auv{i}_speed"] / config.v_max
        out[k + 5] = obs[f"auv{i}_d_border"] / arena
        out[k + 6] = obs[f"auv{i}_tdx"] / arena
        out[k + 7] = obs[f"auv{i}_tdy"] / arena
        out[k + 8] = obs[f"auv{i}_tb_cos"]
        out[k + 9] = obs[f"auv{i}_tb_sin"]
        out[k + 10] = obs[f"auv{i}_d_target"] / arena
        k += 11
    for j in range(config.n_sn):
        out[k] = obs[f"sn{j}_b"]
        k += 1
    # capped so an unbounded pair distance cannot dominate the input scale
    out[k] = min(obs["d_min_auv"], arena) / arena
    out[k + 1] = obs["d_target"] / arena
    out[k + 2] = obs["b_max"]
    return out


def obs_dim(config: WorldConfig) -> int:
    return 11 * config.n_auv + config.n_sn + 3


def action_dim(config: WorldConfig) -> int:
    return 2 * config.n_auv


def step(state: WorldState, actions: np.ndarray, config: WorldConfig) -> tuple[WorldState, StepRecord]:
    """Advance one step. Actions are per-AUV (speed_cmd, turn_cmd) in [-1, 1]."""
    actions = np.asarray(actions, dtype=np.float64).reshape(-1)
    if actions.shape[0] != 2 * config.n_auv:
        raise ValueError(f"expected {2 * config.n_auv} action values, got {actions.shape[0]}")
    if state.step_idx >= config.episode_len:
        raise ValueError(f"episode already finished at step {state.step_idx}")

    cmds = np.clip(actions, -1.0, 1.0).reshape(config.n_auv, 2)
    # zero or negative speed command means hold still: a stopped vehicle sits
    # at an interior point of the command range, not at a saturated extreme
    speed = np.maximum(cmds[:, 0], 0.0) * config.v_max
    heading = state.auv_heading + cmds[:, 1] * config.turn_max
    heading = np.mod(heading + math.pi, 2.0 * math.pi) - math.pi

    pos = state.auv_pos + config.dt * np.stack(
        [speed * np.cos(heading), speed * np.sin(heading)], axis=1
    )
    low = pos < 0.0
    high = pos > config.arena_side
    border_hits = int(np.count_nonzero(np.any(low | high, axis=1)))
    pos = np.clip(pos, 0.0, config.arena_side)

    collisions = 0
    for i in range(config.n_auv):
        for j in range(i + 1, config.n_auv):
            d = math.hypot(pos[i, 0] - pos[j, 0], pos[i, 1] - pos[j, 1])
            if d < config.collision_dist:
                collisions += 1

    sn = np.asarray(config.sn_positions, dtype=np.float64)
    dist2 = (sn[:, 0][:, None] - pos[:, 0][None, :]) ** 2 + (sn[:, 1][:, None] - pos[:, 1][None, :]) ** 2
    in_range = (dist2 <= config.comm_radius**2).any(axis=1)

    buffers = state.sn_buffer.copy()
    served_data = 0.0
    overflow_events = 0
    cap = config.buffer_cap
    for j in range(config.n_sn):
        if in_range[j]:
            drained = min(buffers[j], config.drain_rate)
            buffers[j] -= drained
            served_data += drained
        elif buffers[j] >= cap - _CAP_EPS:
            # full buffer discards its whole fill; partial clamping while
            # approaching the cap is silent
            overflow_events += 1
            buffers[j] = cap
        else:
            buffers[j] = min(cap, buffers[j] + config.fill_rates[j])

    energy = float(np.sum(config.energy_hotel + config.energy_prop_coeff * speed**3 * config.dt))

    new_state = WorldState(
        step_idx=state.step_idx + 1,
        auv_pos=pos,
        auv_heading=heading,
        auv_speed=speed,
        sn_buffer=buffers,
        rng=state.rng,
    )
    obs = observe(
        new_state,
        config,
        collisions=collisions,
        border_hits=border_hits,
        overflow_events=overflow_events,
        served_data=served_data,
        energy=energy,
    )
    record = StepRecord(
        collisions=collisions,
        border_hits=border_hits,
        overflow_events=overflow_events,
        served_data=served_data,
        energy=energy,
        obs=obs,
    )
    return new_state, record


Policy = Callable[[np.ndarray], np.ndarray]
RewardFn = Callable[[Mapping[str, float]], float]


def run_episode(
    config: WorldConfig,
    seed: int,
    policy: Policy,
    reward_fn: RewardFn | None = None,
) -> tuple[list[StepRecord], EpisodeMetrics, float]:
    """Roll one episode; returns records, folded metrics, summed reward.

    If ``reward_fn`` exposes ``per_component(bindings)`` (the weighted
    composite does), per-step component values are stored on each record and
    folded into ``EpisodeMetrics.return_per_component``.
    """
    from .rdsl import EvalError

    state = init_world(config, seed)
    obs = observe(state, config)
    per_component = getattr(reward_fn, "per_component", None)
    records: list[StepRecord] = []
    total = 0.0
    for t in range(config.episode_len):
        action = policy(flatten_obs(obs, config))
        state, record = step(state, action, config)
        obs = record.obs
        if reward_fn is not None:
            try:
                if per_component is not None:
                    values = per_component(obs)
                    record = replace(record, component_values=values)
                    total += reward_fn.compose_values(values)  # type: ignore[attr-defined]
                else:
                    total += reward_fn(obs)
            except EvalError as err:
                raise EvalError(err.kind, f"step {t}: {err.message}", err.line, err.col) from None
        records.append(record)
    metrics = EpisodeMetrics.fold(records, config.n_sn)
    return records, metrics, total
