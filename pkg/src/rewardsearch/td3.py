"""Twin-critic deterministic-policy trainer with hand-written backprop.

All numerics are plain float64 numpy: two-hidden-layer tanh MLPs, Adam, and
explicit backward passes. No autodiff dependency; `gradient_check` compares
every analytic gradient against central finite differences so the backward
code is verifiable rather than trusted.

The agent drives all vehicles at once: one observation vector in, one action
vector (speed and turn command per AUV) out. Updates follow the standard
twin-critic recipe: both critics regress to the min-target bootstrap with
smoothing noise on the target action, the actor updates every
``policy_delay``-th call, and target networks track by Polyak averaging.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import world as world_mod
from .rdsl import EvalError
from .rewards import RewardComponent, WeightedReward
from .world import EpisodeMetrics, WorldConfig

__all__ = [
    "MLP",
    "Adam",
    "ReplayBuffer",
    "TD3Config",
    "TD3Agent",
    "TrainingLog",
    "EpisodeEntry",
    "gradient_check",
    "train",
]


class MLP:
    """Fully-connected net, tanh hidden activations, optional tanh output."""

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator,
        tanh_out: bool = False,
        final_init: float = 3e-3,
    ):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.tanh_out = tanh_out
        self.Ws: list[np.ndarray] = []
        self.bs: list[np.ndarray] = []
        last = len(sizes) - 2
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i == last:
                limit = final_init
            else:
                limit = math.sqrt(6.0 / (n_in + n_out))
            self.Ws.append(rng.uniform(-limit, limit, (n_in, n_out)))
            self.bs.append(np.zeros(n_out, dtype=np.float64))

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for W, b in zip(self.Ws, self.bs):
            out.append(W)
            out.append(b)
        return out

    def copy(self) -> "MLP":
        dup = object.__new__(MLP)
        dup.sizes = self.sizes
        dup.tanh_out = self.tanh_out
        dup.Ws = [W.copy() for W in self.Ws]
        dup.bs = [b.copy() for b in self.bs]
        return dup

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x
        n = len(self.Ws)
        for i in range(n - 1):
            h = np.tanh(h @ self.Ws[i] + self.bs[i])
        out = h @ self.Ws[-1] + self.bs[-1]
        return np.tanh(out) if self.tanh_out else out

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward pass keeping layer activations for `backward`."""
        acts = [x]
        h = x
        n = len(self.Ws)
        for i in range(n - 1):
            h = np.tanh(h @ self.Ws[i] + self.bs[i])
            acts.append(h)
        out = h @ self.Ws[-1] + self.bs[-1]
        if self.tanh_out:
            out = np.tanh(out)
        acts.append(out)
        return out, acts

    def backward(self, acts: list[np.ndarray], dout: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of a scalar loss given d(loss)/d(output).

        Returns (grads aligned with `params()`, d(loss)/d(input)).
        """
        n = len(self.Ws)
        dWs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
        dbs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
        delta = dout
        if self.tanh_out:
            delta = delta * (1.0 - acts[-1] ** 2)
        for i in range(n - 1, -1, -1):
            h_in = acts[i]
            dWs[i] = h_in.T @ delta
            dbs[i] = delta.sum(axis=0)
            delta = delta @ self.Ws[i].T
            if i > 0:
                delta = delta * (1.0 - acts[i] ** 2)
        grads: list[np.ndarray] = []
        for dW, db in zip(dWs, dbs):
            grads.append(dW)
            grads.append(db)
        return grads, delta


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def gradient_check(
    net: MLP,
    loss: Callable[[MLP], tuple[float, list[np.ndarray]]],
    eps: float = 1e-5,
) -> float:
    """Max relative error of analytic gradients vs central finite differences.

    ``loss(net)`` must return the scalar loss and gradients aligned with
    ``net.params()``. The denominator floor keeps finite-difference roundoff
    on near-zero gradient entries from registering as error.
    """
    _, grads = loss(net)
    worst = 0.0
    for p, g in zip(net.params(), grads):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            hi = loss(net)[0]
            flat_p[i] = orig - eps
            lo = loss(net)[0]
            flat_p[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            denom = max(abs(fd), abs(flat_g[i]), 1e-4)
            worst = max(worst, abs(fd - flat_g[i]) / denom)
    return worst


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim), dtype=np.float64)
        self.act = np.zeros((capacity, act_dim), dtype=np.float64)
        self.rew = np.zeros(capacity, dtype=np.float64)
        self.obs2 = np.zeros((capacity, obs_dim), dtype=np.float64)
        self.idx = 0
        self.size = 0

    def push(self, obs: np.ndarray, act: np.ndarray, rew: float, obs2: np.ndarray) -> None:
        i = self.idx
        self.obs[i] = obs
        self.act[i] = act
        self.rew[i] = rew
        self.obs2[i] = obs2
        self.idx = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, batch)
        return self.obs[idx], self.act[idx], self.rew[idx], self.obs2[idx]


@dataclass(frozen=True)
class TD3Config:
    hidden: tuple[int, ...] = (64, 64)
    batch_size: int = 128
    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    target_noise: float = 0.2
    noise_clip: float = 0.5
    explore_noise: float = 0.1
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    buffer_size: int = 100_000
    warmup_steps: int = 1000
    train_steps: int = 30_000

    def validate(self) -> None:
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"gamma must be in (0,1), got {self.gamma}")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError(f"tau must be in (0,1], got {self.tau}")
        if self.policy_delay < 1:
            raise ValueError(f"policy_delay must be >= 1, got {self.policy_delay}")
        if self.batch_size < 1 or self.buffer_size < self.batch_size:
            raise ValueError("need buffer_size >= batch_size >= 1")
        if self.train_steps < 0 or self.warmup_steps < 0:
            raise ValueError("step counts must be >= 0")


class TD3Agent:
    def __init__(self, obs_dim: int, act_dim: int, cfg: TD3Config, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.rng = rng
        hidden = list(cfg.hidden)
        self.actor = MLP([obs_dim, *hidden, act_dim], rng, tanh_out=True)
        self.critic1 = MLP([obs_dim + act_dim, *hidden, 1], rng)
        self.critic2 = MLP([obs_dim + act_dim, *hidden, 1], rng)
        self.actor_t = self.actor.copy()
        self.critic1_t = self.critic1.copy()
        self.critic2_t = self.critic2.copy()
        self.opt_actor = Adam(self.actor.params(), cfg.actor_lr)
        self.opt_c1 = Adam(self.critic1.params(), cfg.critic_lr)
        self.opt_c2 = Adam(self.critic2.params(), cfg.critic_lr)
        self.update_count = 0

    def act(self, obs: np.ndarray, noise_scale: float = 0.0) -> np.ndarray:
        a = self.actor.forward(obs[None, :])[0]
        if noise_scale > 0.0:
            a = a + self.rng.normal(0.0, noise_scale, self.act_dim)
        return np.clip(a, -1.0, 1.0)

    def _polyak(self, online: MLP, target: MLP) -> None:
        tau = self.cfg.tau
        for p, pt in zip(online.params(), target.params()):
            pt *= 1.0 - tau
            pt += tau * p

    def update(self, buffer: ReplayBuffer) -> tuple[float, float | None]:
        cfg = self.cfg
        O, A, R, O2 = buffer.sample(cfg.batch_size, self.rng)
        B = cfg.batch_size

        noise = np.clip(
            self.rng.normal(0.0, cfg.target_noise, (B, self.act_dim)),
            -cfg.noise_clip,
            cfg.noise_clip,
        )
        a2 = np.clip(self.actor_t.forward(O2) + noise, -1.0, 1.0)
        sa2 = np.concatenate([O2, a2], axis=1)
        q_t = np.minimum(self.critic1_t.forward(sa2), self.critic2_t.forward(sa2))[:, 0]
        # episodes end on the time limit only, so the bootstrap never zeroes out
        y = R + cfg.gamma * q_t

        sa = np.concatenate([O, A], axis=1)
        critic_loss = 0.0
        for critic, opt in ((self.critic1, self.opt_c1), (self.critic2, self.opt_c2)):
            q, acts = critic.forward_cached(sa)
            err = q[:, 0] - y
            critic_loss += float(np.mean(err**2))
            dout = (2.0 / B) * err[:, None]
            grads, _ = critic.backward(acts, dout)
            opt.step(critic.params(), grads)
        critic_loss /= 2.0
        if not math.isfinite(critic_loss):
            raise FloatingPointError(f"critic loss diverged: {critic_loss}")

        self.update_count += 1
        actor_loss: float | None = None
        if self.update_count % cfg.policy_delay == 0:
            a_pi, actor_acts = self.actor.forward_cached(O)
            sa_pi = np.concatenate([O, a_pi], axis=1)
            q_pi, critic_acts = self.critic1.forward_cached(sa_pi)
            actor_loss = float(-np.mean(q_pi))
            if not math.isfinite(actor_loss):
                raise FloatingPointError(f"actor loss diverged: {actor_loss}")
            dq = np.full((B, 1), -1.0 / B)
            _, dsa = self.critic1.backward(critic_acts, dq)
            da = dsa[:, self.obs_dim:]
            actor_grads, _ = self.actor.backward(actor_acts, da)
            self.opt_actor.step(self.actor.params(), actor_grads)
            self._polyak(self.actor, self.actor_t)
            self._polyak(self.critic1, self.critic1_t)
            self._polyak(self.critic2, self.critic2_t)
        return critic_loss, actor_loss


@dataclass(frozen=True)
class EpisodeEntry:
    episode: int
    metrics: EpisodeMetrics
    weighted_return: float
    component_returns: dict[str, float]


@dataclass(frozen=True)
class TrainingLog:
    seed: int
    train_steps: int
    episode_len: int
    weights: dict[str, float]
    episodes: tuple[EpisodeEntry, ...]
    losses: tuple[tuple[int, float, float | None], ...]
    wall_clock_s: float
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train_steps": self.train_steps,
            "episode_len": self.episode_len,
            "weights": self.weights,
            "wall_clock_s": self.wall_clock_s,
            "error": self.error,
            "episodes": [
                {
                    "episode": e.episode,
                    **e.metrics.as_dict(),
                    "return": e.weighted_return,
                    "components": e.component_returns,
                }
                for e in self.episodes
            ],
            "losses": [list(row) for row in self.losses],
        }

    @staticmethod
    def from_dict(data: Mapping) -> "TrainingLog":
        episodes = []
        for row in data["episodes"]:
            metrics = EpisodeMetrics(
                total_collisions=row["total_collisions"],
                total_border_hits=row["total_border_hits"],
                overflow_per_node=row["overflow_per_node"],
                total_energy=row["total_energy"],
                total_served=row["total_served"],
                return_per_component=dict(row["components"]),
            )
            episodes.append(
                EpisodeEntry(
                    episode=row["episode"],
                    metrics=metrics,
                    weighted_return=row["return"],
                    component_returns=dict(row["components"]),
                )
            )
        return TrainingLog(
            seed=data["seed"],
            train_steps=data["train_steps"],
            episode_len=data["episode_len"],
            weights=dict(data["weights"]),
            episodes=tuple(episodes),
            losses=tuple((r[0], r[1], r[2]) for r in data["losses"]),
            wall_clock_s=data["wall_clock_s"],
            error=data.get("error"),
        )

    def to_csv(self) -> str:
        comp_ids = list(self.weights)
        header = [
            "episode",
            "total_collisions",
            "total_border_hits",
            "overflow_per_node",
            "total_energy",
            "total_served",
            "return",
        ] + comp_ids
        lines = [",".join(header)]
        for e in self.episodes:
            row = [
                str(e.episode),
                repr(e.metrics.total_collisions),
                repr(e.metrics.total_border_hits),
                repr(e.metrics.overflow_per_node),
                repr(e.metrics.total_energy),
                repr(e.metrics.total_served),
                repr(e.weighted_return),
            ] + [repr(e.component_returns.get(c, 0.0)) for c in comp_ids]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def train(
    config: WorldConfig,
    weights: Mapping[str, float],
    components: Mapping[str, RewardComponent],
    td3cfg: TD3Config,
    seed: int,
    loss_log_every: int = 100,
) -> TrainingLog:
    """Run one full training; bit-reproducible for a given seed.

    A reward evaluation fault stops training and is recorded on the log
    rather than raised, so a search round with one broken group still
    reports the others.
    """
    config.validate()
    td3cfg.validate()
    reward = WeightedReward(components, weights)
    obs_dim = world_mod.obs_dim(config)
    act_dim = world_mod.action_dim(config)
    rng = np.random.default_rng(seed)
    agent = TD3Agent(obs_dim, act_dim, td3cfg, rng)
    buffer = ReplayBuffer(td3cfg.buffer_size, obs_dim, act_dim)

    t_start = time.perf_counter()
    episodes: list[EpisodeEntry] = []
    losses: list[tuple[int, float, float | None]] = []
    error: str | None = None

    state = world_mod.init_world(config, seed)
    obs_vec = world_mod.flatten_obs(world_mod.observe(state, config), config)
    ep_records: list[world_mod.StepRecord] = []
    ep_return = 0.0

    try:
        for t in range(td3cfg.train_steps):
            if t < td3cfg.warmup_steps:
                action = rng.uniform(-1.0, 1.0, act_dim)
            else:
                action = agent.act(obs_vec, td3cfg.explore_noise)
            state, rec = world_mod.step(state, action, config)
            values = reward.per_component(rec.obs)
            r = reward.compose_values(values)
            rec = replace(rec, component_values=values)
            ep_records.append(rec)
            ep_return += r

            obs2_vec = world_mod.flatten_obs(rec.obs, config)
            buffer.push(obs_vec, action, r, obs2_vec)
            obs_vec = obs2_vec

            if t + 1 >= td3cfg.warmup_steps and buffer.size >= td3cfg.batch_size:
                closs, aloss = agent.update(buffer)
                if agent.update_count % loss_log_every == 0:
                    losses.append((agent.update_count, closs, aloss))

            if state.step_idx >= config.episode_len:
                metrics = EpisodeMetrics.fold(ep_records, config.n_sn)
                episodes.append(
                    EpisodeEntry(
                        episode=len(episodes),
                        metrics=metrics,
                        weighted_return=ep_return,
                        component_returns=dict(metrics.return_per_component),
                    )
                )
                ep_records = []
                ep_return = 0.0
                state = world_mod.init_world(config, seed)
                obs_vec = world_mod.flatten_obs(world_mod.observe(state, config), config)
    except EvalError as err:
        error = f"reward evaluation failed: {err}"
    except FloatingPointError as err:
        error = str(err)

    return TrainingLog(
        seed=seed,
        train_steps=td3cfg.train_steps,
        episode_len=config.episode_len,
        weights={k: float(v) for k, v in weights.items()},
        episodes=tuple(episodes),
        losses=tuple(losses),
        wall_clock_s=time.perf_counter() - t_start,
        error=error,
    )


def greedy_policy(agent: TD3Agent) -> Callable[[np.ndarray], np.ndarray]:
    def policy(obs_vec: np.ndarray) -> np.ndarray:
        return agent.act(obs_vec, 0.0)

    return policy
