"""Multi-agent DDPG: decentralised actors, centralised critics, replay, training loop.

All agents share layer sizes, so each of actor, critic and their targets is
one multi-member :class:`~satnoma.neural.DenseNet`; member ``i`` is agent
``i``'s network. Agent ``i``'s critic scores the joint observation of all
agents together with the joint action.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import TrainConfig
from .neural import Adam, DenseNet, mse, soft_update

logger = logging.getLogger(__name__)

# final-layer init range, so fresh actors start near the middle of their range
OUTPUT_INIT = 3e-3

METRIC_FIELDS = ("episode", "mean_reward", "hit_rate", "actor_loss", "critic_loss", "noise_scale")


class DivergenceError(RuntimeError):
    pass


@dataclass
class Minibatch:
    obs: np.ndarray        # (B, N, obs_dim)
    actions: np.ndarray    # (B, N, act_dim)
    rewards: np.ndarray    # (B, N)
    next_obs: np.ndarray   # (B, N, obs_dim)


class ReplayBuffer:
    """Bounded FIFO of joint transitions; the oldest record is evicted first."""

    def __init__(self, capacity: int, num_agents: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, num_agents, obs_dim))
        self.actions = np.zeros((capacity, num_agents, act_dim))
        self.rewards = np.zeros((capacity, num_agents))
        self.next_obs = np.zeros((capacity, num_agents, obs_dim))
        self._next = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, obs, actions, rewards, next_obs) -> None:
        i = self._next
        self.obs[i] = obs
        self.actions[i] = actions
        self.rewards[i] = rewards
        self.next_obs[i] = next_obs
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _physical(self, logical: np.ndarray) -> np.ndarray:
        oldest = (self._next - self.size) % self.capacity
        return (oldest + logical) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> Minibatch:
        """Uniform minibatch without replacement."""
        if batch_size > self.size:
            raise ValueError(f"buffer holds {self.size} < {batch_size} transitions")
        idx = self._physical(rng.choice(self.size, size=batch_size, replace=False))
        return Minibatch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx])

    def transitions(self):
        """Stored records, oldest first, as ``(obs, actions, rewards, next_obs)``."""
        for j in self._physical(np.arange(self.size)):
            yield self.obs[j], self.actions[j], self.rewards[j], self.next_obs[j]


@dataclass
class AgentBundle:
    """One agent's networks, copied out of the shared multi-member nets."""

    index: int
    role: str
    actor: DenseNet
    critic: DenseNet
    target_actor: DenseNet
    target_critic: DenseNet


class MADDPG:
    def __init__(self, num_agents: int, obs_dim: int, act_dim: int,
                 head, cfg: TrainConfig, rng: np.random.Generator, role: str = "user",
                 topk=None):
        self.num_agents = num_agents
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.head = tuple(head)
        self.cfg = cfg
        self.role = role
        hidden = tuple(cfg.hidden)
        self.critic_in = num_agents * obs_dim + num_agents * act_dim
        self.actor = DenseNet((obs_dim, *hidden, act_dim), "relu", self.head, num_agents, rng,
                              out_bound=OUTPUT_INIT, topk=topk)
        self.critic = DenseNet((self.critic_in, *hidden, 1), "relu", None, num_agents, rng,
                               out_bound=OUTPUT_INIT)
        assert self.critic.sizes[0] == num_agents * (obs_dim + act_dim)
        self.target_actor = self.actor.clone()
        self.target_critic = self.critic.clone()
        self.actor_opt = Adam(self.actor.theta.shape, lr=cfg.lr)
        self.critic_opt = Adam(self.critic.theta.shape, lr=cfg.lr)
        self.updates = 0
        # reward multiplier, fixed from the first minibatch
        self.reward_scale: float | None = None
        self._bounded = np.zeros(act_dim, dtype=bool)
        start = 0
        for name, width in self.head:
            if name == "sigmoid":
                self._bounded[start:start + width] = True
            start += width

    @classmethod
    def for_env(cls, env, cfg: TrainConfig, rng: np.random.Generator, role: str = "user") -> "MADDPG":
        return cls(env.num_agents, env.obs_dim, env.act_dim, env.head, cfg, rng, role,
                   getattr(env, "topk", None))

    def bundle(self, i: int) -> AgentBundle:
        return AgentBundle(i, self.role, self.actor.member(i), self.critic.member(i),
                           self.target_actor.member(i), self.target_critic.member(i))

    # -- acting -------------------------------------------------------------

    def policy(self, obs: np.ndarray) -> np.ndarray:
        """Deterministic actor outputs for ``obs`` of shape (agents, obs_dim)."""
        obs = np.asarray(obs, dtype=float).reshape(self.num_agents, 1, self.obs_dim)
        return self.actor.forward(obs)[0][:, 0, :]

    def select_action(self, obs: np.ndarray, noise_scale: float,
                      rng: np.random.Generator | None = None) -> np.ndarray:
        """Actor output plus Gaussian noise, with bounded heads clipped to [0, 1]."""
        act = self.policy(obs).copy()
        if noise_scale > 0:
            act = act + noise_scale * rng.standard_normal(act.shape)
        act[:, self._bounded] = np.clip(act[:, self._bounded], 0.0, 1.0)
        return act

    # -- learning -----------------------------------------------------------

    def _joint(self, batch: Minibatch):
        B = batch.obs.shape[0]
        return batch.obs.reshape(B, -1), batch.actions.reshape(B, -1), batch.next_obs.reshape(B, -1)

    def critic_targets(self, batch: Minibatch) -> np.ndarray:
        """``y_i = r_i + gamma * Q'_i(x', mu'_1(o'_1), ..., mu'_N(o'_N))``, shape (N, B)."""
        B = batch.obs.shape[0]
        N = self.num_agents
        _, _, next_x = self._joint(batch)
        next_act = self.target_actor.forward(batch.next_obs.transpose(1, 0, 2))[0]
        next_joint = next_act.transpose(1, 0, 2).reshape(B, -1)
        inp = np.concatenate([next_x, next_joint], axis=1)
        q_next = self.target_critic.forward(np.broadcast_to(inp, (N, B, inp.shape[1])))[0][..., 0]
        scale = 1.0 if self.reward_scale is None else self.reward_scale
        return scale * batch.rewards.T + self.cfg.gamma * q_next

    def critic_update(self, batch: Minibatch) -> np.ndarray:
        """One Adam step on each critic's squared TD error; returns pre-step losses."""
        B = batch.obs.shape[0]
        N = self.num_agents
        y = self.critic_targets(batch)
        x, a, _ = self._joint(batch)
        inp = np.concatenate([x, a], axis=1)
        q, cache = self.critic.forward(np.broadcast_to(inp, (N, B, inp.shape[1])))
        loss, grad = mse(q[..., 0], y)
        g_theta, _ = self.critic.backward(cache, grad[..., None])
        self.critic_opt.step(self.critic.theta, g_theta, self.cfg.grad_clip)
        return loss

    def actor_update(self, batch: Minibatch, critic=None) -> np.ndarray:
        """Deterministic policy gradient through each agent's critic.

        Agent ``i``'s own action is replaced by ``mu_i(o_i)``; the others come
        from the batch. Returns the per-agent mean Q before the step.
        """
        critic = self.critic if critic is None else critic
        B = batch.obs.shape[0]
        N, od, ad = self.num_agents, self.obs_dim, self.act_dim
        mu, a_cache = self.actor.forward(batch.obs.transpose(1, 0, 2))       # (N, B, ad)
        x, a, _ = self._joint(batch)
        acts = np.repeat(a[None], N, axis=0).reshape(N, B, N, ad)
        agents = np.arange(N)
        acts[agents, :, agents, :] = mu
        inp = np.concatenate([np.broadcast_to(x, (N, B, N * od)), acts.reshape(N, B, N * ad)], axis=2)
        q, c_cache = critic.forward(inp)
        _, g_in = critic.backward(c_cache, np.full(q.shape, -1.0 / B), param_grad=False)
        g_mu = g_in[:, :, N * od:].reshape(N, B, N, ad)[agents, :, agents, :]
        # small L2 pull on the actor's pre-activations keeps bounded heads out of saturation
        pre = a_cache[-1][1]
        reg = self.cfg.action_reg * 2.0 * pre / (B * ad) if self.cfg.action_reg else None
        g_theta, _ = self.actor.backward(a_cache, g_mu, grad_pre=reg)
        self.actor_opt.step(self.actor.theta, g_theta, self.cfg.grad_clip)
        return q[..., 0].mean(axis=1)

    def soft_update_targets(self) -> None:
        soft_update(self.target_actor, self.actor, self.cfg.tau)
        soft_update(self.target_critic, self.critic, self.cfg.tau)

    def update(self, batch: Minibatch) -> tuple[float, float]:
        """Critic step, actor step, then target tracking for every agent.

        During the first ``actor_warmup`` calls only the critics learn: Adam
        turns the near-random slope of a fresh critic into full-size actor
        steps, which would drive bounded heads into saturation before the
        critic has seen any data.
        """
        if self.reward_scale is None:
            self.reward_scale = fit_reward_scale(batch.rewards)
        critic_loss = self.critic_update(batch)
        self.updates += 1
        if self.updates <= self.cfg.actor_warmup:
            soft_update(self.target_critic, self.critic, self.cfg.tau)
            return float(critic_loss.mean()), 0.0
        q = self.actor_update(batch)
        self.soft_update_targets()
        return float(critic_loss.mean()), float(-q.mean())


def fit_reward_scale(rewards: np.ndarray) -> float:
    """``1 / mean |r|`` over a reward block, shared by every agent.

    Critic outputs start near zero and Adam moves them by about ``lr`` per
    step, so returns in the hundreds would take most of a run just to reach.
    One common factor keeps the agents' relative reward sizes intact.
    """
    mag = float(np.abs(np.asarray(rewards, dtype=float)).mean())
    return 1.0 / mag if mag > 0 else 1.0


# -- training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    rows: list[dict] = field(default_factory=list)
    trainer: MADDPG | None = None
    violations: int = 0
    rng_state: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def final_mean(self, name: str = "mean_reward", last: int = 100) -> float:
        return float(self.column(name)[-last:].mean())


def _streams(seed: int):
    init, noise, sample, episodes = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(init), np.random.default_rng(noise),
            np.random.default_rng(sample), np.random.default_rng(episodes))


def episode_seeds(seed: int, episodes: int) -> np.ndarray:
    """Per-episode env seeds shared by every policy run with the same ``seed``."""
    return _streams(seed)[3].integers(0, 2 ** 32, size=episodes)


def train(env, cfg: TrainConfig, *, role: str = "user",
          on_episode: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the episode x step loop with per-step updates once the buffer fills.

    ``on_episode`` receives each metrics row as soon as the episode ends.
    """
    init_rng, noise_rng, sample_rng, _ = _streams(cfg.seed)
    seeds = episode_seeds(cfg.seed, cfg.episodes)
    trainer = MADDPG.for_env(env, cfg, init_rng, role)
    if cfg.batch_size > cfg.buffer_capacity:
        raise ValueError("batch size exceeds buffer capacity")
    # never allocate more slots than the run can fill
    buffer = ReplayBuffer(min(cfg.buffer_capacity, max(cfg.episodes * cfg.steps, 1)),
                          env.num_agents, env.obs_dim, env.act_dim)
    env.episode_length = cfg.steps
    if hasattr(env, "inner"):
        env.inner.episode_length = cfg.steps
    result = TrainResult(trainer=trainer)
    for ep in range(cfg.episodes):
        noise = cfg.noise_scale(ep)
        obs = env.reset(int(seeds[ep]))
        ee = hit = a_loss = c_loss = 0.0
        updates = 0
        for _ in range(cfg.steps):
            act = trainer.select_action(obs, noise, noise_rng)
            res = env.step(act)
            buffer.push(obs, act, res.rewards, res.obs)
            obs = res.obs
            ee += res.info["system_ee"]
            hit += res.info["hit_rate"]
            if len(buffer) >= cfg.batch_size:
                c, a = trainer.update(buffer.sample(cfg.batch_size, sample_rng))
                if not (math.isfinite(c) and math.isfinite(a)):
                    raise DivergenceError(f"non-finite loss at episode {ep}: critic={c}, actor={a}")
                c_loss += c
                a_loss += a
                updates += 1
        row = {
            "episode": ep,
            "mean_reward": ee / cfg.steps,
            "hit_rate": hit / cfg.steps,
            "actor_loss": a_loss / updates if updates else 0.0,
            "critic_loss": c_loss / updates if updates else 0.0,
            "noise_scale": noise,
        }
        result.rows.append(row)
        if on_episode is not None:
            on_episode(row)
        logger.debug("episode %d: %s", ep, row)
    result.violations = len(env.violations)
    result.rng_state = {"noise": noise_rng.bit_generator.state,
                        "sample": sample_rng.bit_generator.state}
    return result


def train_resource(env, cfg: TrainConfig, **kwargs) -> TrainResult:
    """Users learn association and power control."""
    return train(env, cfg, role="user", **kwargs)


def train_cache(env, cfg: TrainConfig, **kwargs) -> TrainResult:
    """Facilities learn cache placement under a frozen association."""
    return train(env, cfg, role="facility", **kwargs)


def evaluate(env, policy: Callable[[np.ndarray, np.random.Generator], np.ndarray],
             episodes: int, steps: int, seed: int) -> TrainResult:
    """Roll out a fixed policy and log rows in the training format."""
    rng = np.random.default_rng([seed, 7])
    seeds = episode_seeds(seed, episodes)
    env.episode_length = steps
    if hasattr(env, "inner"):
        env.inner.episode_length = steps
    result = TrainResult()
    for ep in range(episodes):
        obs = env.reset(int(seeds[ep]))
        ee = hit = 0.0
        for _ in range(steps):
            res = env.step(policy(obs, rng))
            obs = res.obs
            ee += res.info["system_ee"]
            hit += res.info["hit_rate"]
        result.rows.append({"episode": ep, "mean_reward": ee / steps, "hit_rate": hit / steps,
                            "actor_loss": 0.0, "critic_loss": 0.0, "noise_scale": 0.0})
    result.violations = len(env.violations)
    return result


def greedy_actor_policy(trainer: MADDPG):
    """Noise-free policy from a trained actor, usable with :func:`evaluate`."""
    return lambda obs, rng: trainer.select_action(obs, 0.0)


# -- checkpoints -----------------------------------------------------------------

def config_hash(resolved: dict) -> str:
    return hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()


def save_checkpoint(trainer: MADDPG, directory: str | Path, *, episode: int,
                    resolved: dict, rng_state: dict | None = None) -> Path:
    """Write per-agent actor/critic blobs and a text manifest."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(trainer.num_agents):
        (out / f"actor_{i}.bin").write_bytes(trainer.actor.to_bytes(i))
        (out / f"critic_{i}.bin").write_bytes(trainer.critic.to_bytes(i))
    manifest = {
        "config_hash": config_hash(resolved),
        "episode": episode,
        "updates": trainer.updates,
        "reward_scale": trainer.reward_scale,
        "num_agents": trainer.num_agents,
        "role": trainer.role,
        "actor_head": [list(h) for h in trainer.head],
        "actor_topk": None if trainer.actor.topk is None else trainer.actor.topk.tolist(),
        "hidden_activation": trainer.actor.hidden_activation,
        "rng_state": rng_state or {},
    }
    path = out / "manifest.txt"
    path.write_text("\n".join(f"{k}={json.dumps(v, sort_keys=True)}" for k, v in manifest.items()) + "\n")
    return path


def read_manifest(directory: str | Path) -> dict:
    out = {}
    for line in (Path(directory) / "manifest.txt").read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = json.loads(value)
    return out


def load_actors(directory: str | Path) -> DenseNet:
    """Rebuild the multi-member actor net from a checkpoint directory."""
    manifest = read_manifest(directory)
    head = [tuple(h) for h in manifest["actor_head"]]
    topk = manifest.get("actor_topk")
    nets = [DenseNet.from_bytes((Path(directory) / f"actor_{i}.bin").read_bytes(),
                                manifest["hidden_activation"], head,
                                None if topk is None else topk[i])
            for i in range(manifest["num_agents"])]
    return DenseNet.stack(nets)
