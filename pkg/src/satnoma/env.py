"""The two decision processes over the simulated network.

:class:`ResourceEnv` makes every user an agent choosing a facility and a
power factor. :class:`CacheEnv` makes every BS and satellite an agent
choosing its cached files while association and power stay frozen.
:class:`CentralizedEnv` folds all agents of either env into a single agent.

Environments consume raw actor outputs and decode them here (argmax,
clipping, top-k) so the trainer stays generic. Dynamics depend only on the
current state, the joint action and the env's own random stream.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .caching import top_files, zipf_pmf, sample_requests
from .channel import realize_channels, sat_gain_matrix, sat_link_matrix
from .config import NetworkConfig, validate_config
from .link import system_metrics
from .topology import UNASSOCIATED, NetworkState, association_matrix, generate_topology

_POWER_RTOL = 1e-12


@dataclass
class StepResult:
    obs: np.ndarray          # (agents, obs_dim)
    rewards: np.ndarray      # (agents,)
    done: bool
    info: dict[str, Any] = field(default_factory=dict)


def repair_actions(raw: np.ndarray, cfg: NetworkConfig):
    """Decode raw user actions into a feasible association and power vector.

    Each row is ``[logit_0 .. logit_{M+K-1}, beta]``. A user keeps its argmax
    facility while that facility has room; over-subscribed facilities admit
    users in ascending index order and leave the rest unassociated.
    """
    raw = np.asarray(raw, dtype=float)
    F = cfg.num_facilities
    choice = np.argmax(raw[:, :F], axis=1)
    beta = np.clip(raw[:, F], 0.0, 1.0)
    caps = np.array([cfg.capacity_of(f) for f in range(F)])
    order = np.argsort(choice, kind="stable")
    sorted_choice = choice[order]
    first = np.searchsorted(sorted_choice, np.arange(F))
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size) - first[sorted_choice]
    facility = np.where(rank < caps[choice], choice, UNASSOCIATED)
    return facility, beta


def check_constraints(state: NetworkState, cfg: NetworkConfig, *,
                      allow_full_cache: bool = False) -> list[str]:
    """Audit association, power, capacity, power-factor and cache-size limits."""
    problems = []
    F = cfg.num_facilities
    facility = np.asarray(state.facility)
    if np.any((facility < UNASSOCIATED) | (facility >= F)):
        problems.append("facility index out of range")
        return problems
    alpha = association_matrix(facility, F)
    if np.any(alpha.sum(axis=1) > 1):
        problems.append("user associated with more than one facility")
    counts = alpha.sum(axis=0)
    for f in range(F):
        if counts[f] > cfg.capacity_of(f):
            problems.append(f"facility {f} serves {counts[f]} > {cfg.capacity_of(f)} users")
    beta = np.asarray(state.beta)
    if np.any(~np.isfinite(beta)) or np.any((beta < 0) | (beta > 1)):
        problems.append("power control factor outside [0, 1]")
    else:
        p = state.powers(cfg)
        on_bs = (facility >= 0) & (facility < cfg.num_bs)
        on_sat = facility >= cfg.num_bs
        if np.any(p[on_bs] > cfg.p_bs_max / cfg.bs_capacity * (1 + _POWER_RTOL)):
            problems.append("BS user power above per-user limit")
        if np.any(p[on_sat] > cfg.p_sat_max / cfg.sat_capacity * (1 + _POWER_RTOL)):
            problems.append("satellite user power above per-user limit")
    for f, pool in enumerate(state.pools):
        cap = cfg.cache_capacity_of(f)
        if len(pool) > cap:
            problems.append(f"facility {f} caches {len(pool)} > {cap} files")
        if pool and (min(pool) < 1 or max(pool) > cfg.library_size):
            problems.append(f"facility {f} caches an unknown file")
        if not allow_full_cache and len(pool) >= cfg.library_size:
            problems.append(f"facility {f} caches the whole library")
    return problems


def served_hit_rate(state: NetworkState, hits: np.ndarray) -> float:
    """Fraction of associated users whose request was served from cache."""
    served = np.asarray(state.facility) >= 0
    return float(hits[served].mean()) if served.any() else 0.0


class _NetworkEnv:
    num_agents: int
    act_dim: int
    head: tuple[tuple[str, int], ...]

    def __init__(self, cfg: NetworkConfig, *, check: bool = True, allow_full_cache: bool = False,
                 record_trace: bool = False):
        self.cfg = validate_config(cfg, allow_full_cache=allow_full_cache)
        self.allow_full_cache = allow_full_cache
        self.topology = generate_topology(cfg, np.random.default_rng(cfg.seed))
        self.sat_links = sat_link_matrix(cfg, self.topology), sat_gain_matrix(cfg, self.topology)
        self.popularity = zipf_pmf(cfg.library_size, cfg.zipf_exponent)
        self.state = NetworkState.empty(cfg)
        self.check = check
        self.violations: list[str] = []
        self.steps_checked = 0
        self.trace: list[tuple] | None = [] if record_trace else None
        self.rng: np.random.Generator | None = None
        self.t = 0
        self.episode_length = cfg.episode_length
        self._prev = np.zeros(self.num_agents)
        self._last_metrics = None

    @property
    def obs_dim(self) -> int:
        return 2 if self.cfg.extended_obs else 1

    def _observe(self, indicator: np.ndarray) -> np.ndarray:
        if self.cfg.extended_obs:
            return np.column_stack([indicator, self._prev])
        return indicator[:, None].astype(float)

    def reset(self, seed: int) -> np.ndarray:
        """Start an episode with its own channel/request stream."""
        self.rng = np.random.default_rng([self.cfg.seed, int(seed)])
        self.t = 0
        self._prev = np.zeros(self.num_agents)
        return self._observe(np.zeros(self.num_agents))

    def _advance(self):
        if self.rng is None:
            raise RuntimeError("call reset() before step()")
        if self.t >= self.episode_length:
            raise RuntimeError("episode is done; call reset()")
        channels = realize_channels(self.cfg, self.topology, self.rng, self.sat_links)
        self.state.requests = sample_requests(self.popularity, self.cfg.num_users, self.rng).files
        metrics = system_metrics(self.state, channels, self.cfg)
        if self.check:
            found = check_constraints(self.state, self.cfg, allow_full_cache=self.allow_full_cache)
            self.violations.extend(f"t={self.t}: {msg}" for msg in found)
            self.steps_checked += 1
        self._last_metrics = metrics
        return channels, metrics

    def _finish(self, rewards: np.ndarray, metrics) -> StepResult:
        indicator = (rewards >= self._prev).astype(float)
        self._prev = rewards.copy()
        obs = self._observe(indicator)
        self.t += 1
        info = {
            "system_ee": metrics.objective,
            "hit_rate": served_hit_rate(self.state, metrics.hits),
            "associated": int((self.state.facility >= 0).sum()),
            "t": self.t,
        }
        return StepResult(obs, rewards, self.t >= self.episode_length, info)

    def write_trace(self, path: str | Path) -> None:
        """Dump recorded steps as CSV: step, agent, action, reward, indicator."""
        if self.trace is None:
            raise RuntimeError("env was created without record_trace=True")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "agent", "action", "reward", "indicator"])
            for row in self.trace:
                writer.writerow([row[0], row[1], row[2], repr(float(row[3])), int(row[4])])


class ResourceEnv(_NetworkEnv):
    """Users as agents: association (argmax over facilities) and power factor.

    Cache pools stay at ``pools`` (empty by default) for the whole run.
    """

    def __init__(self, cfg: NetworkConfig, pools: list[frozenset[int]] | None = None, **kwargs):
        self.num_agents = cfg.num_users
        self.act_dim = cfg.num_facilities + 1
        self.head = (("tanh", cfg.num_facilities), ("sigmoid", 1))
        self.topk = None
        super().__init__(cfg, **kwargs)
        if pools is not None:
            if len(pools) != cfg.num_facilities:
                raise ValueError("need one pool per facility")
            self.state.pools = [frozenset(p) for p in pools]

    def step(self, actions: np.ndarray) -> StepResult:
        actions = np.asarray(actions, dtype=float).reshape(self.num_agents, self.act_dim)
        facility, beta = repair_actions(actions, self.cfg)
        self.state.facility = facility
        self.state.beta = beta
        _, metrics = self._advance()
        rewards = metrics.ee.copy()
        result = self._finish(rewards, metrics)
        if self.trace is not None:
            for n in range(self.num_agents):
                self.trace.append((self.t, n, f"f={facility[n]};beta={beta[n]!r}",
                                   rewards[n], result.obs[n, 0]))
        return result


class CacheEnv(_NetworkEnv):
    """BSs and satellites as agents: each picks its top-scoring files.

    ``facility`` and ``beta`` are the frozen association and power factors
    (typically produced by a trained resource policy).
    """

    def __init__(self, cfg: NetworkConfig, facility, beta, **kwargs):
        self.num_agents = cfg.num_facilities
        self.act_dim = cfg.library_size
        # relaxed top-k scores: the k files to cache sit above 0.5, the rest below
        self.head = (("topk", cfg.library_size),)
        self.topk = [[cfg.cache_capacity_of(f)] for f in range(cfg.num_facilities)]
        super().__init__(cfg, **kwargs)
        self.state.facility = np.asarray(facility, dtype=int).copy()
        self.state.beta = np.asarray(beta, dtype=float).copy()
        found = check_constraints(self.state, cfg, allow_full_cache=self.allow_full_cache)
        if found:
            raise ValueError("frozen association is infeasible: " + "; ".join(found))

    def decode(self, actions: np.ndarray) -> list[frozenset[int]]:
        actions = np.asarray(actions, dtype=float).reshape(self.num_agents, self.act_dim)
        return [top_files(actions[f], self.cfg.cache_capacity_of(f)) for f in range(self.num_agents)]

    def facility_rewards(self, ee: np.ndarray) -> np.ndarray:
        served = self.state.facility >= 0
        return np.bincount(self.state.facility[served], weights=ee[served],
                           minlength=self.num_agents).astype(float)

    def step(self, actions: np.ndarray) -> StepResult:
        self.state.pools = self.decode(actions)
        _, metrics = self._advance()
        rewards = self.facility_rewards(metrics.ee)
        result = self._finish(rewards, metrics)
        if self.trace is not None:
            for f in range(self.num_agents):
                files = "|".join(str(u) for u in sorted(self.state.pools[f]))
                self.trace.append((self.t, f, f"files={files}", rewards[f], result.obs[f, 0]))
        return result


class CentralizedEnv:
    """One agent observing every inner observation and emitting every action.

    The reward is the sum of the inner agents' rewards.
    """

    def __init__(self, inner: _NetworkEnv):
        self.inner = inner
        self.cfg = inner.cfg
        self.num_agents = 1
        self.obs_dim = inner.num_agents * inner.obs_dim
        self.act_dim = inner.num_agents * inner.act_dim
        self.head = tuple(inner.head) * inner.num_agents
        topk = getattr(inner, "topk", None)
        self.topk = None if topk is None else [[k for row in topk for k in row]]
        self.episode_length = inner.episode_length

    @property
    def violations(self):
        return self.inner.violations

    def reset(self, seed: int) -> np.ndarray:
        return self.inner.reset(seed).reshape(1, -1)

    def step(self, actions: np.ndarray) -> StepResult:
        inner_actions = np.asarray(actions, dtype=float).reshape(self.inner.num_agents, self.inner.act_dim)
        res = self.inner.step(inner_actions)
        return StepResult(res.obs.reshape(1, -1), np.array([res.rewards.sum()]), res.done, res.info)
