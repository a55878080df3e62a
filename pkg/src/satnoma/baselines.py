"""Comparators: random policy, popularity caching, exhaustive cache search, DDPG."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .caching import ZipfPopularity
from .channel import realize_channels
from .config import NetworkConfig, TrainConfig
from .env import CacheEnv, CentralizedEnv, ResourceEnv
from .link import system_metrics
from .maddpg import MADDPG, TrainResult, train
from .topology import UNASSOCIATED, NetworkState, Topology

POLICY_KINDS = ("random", "greedy_cache", "exhaustive_cache", "ddpg_single", "maddpg")
EXHAUSTIVE_LIMIT = 10 ** 6


def placement_count(library_size: int, capacities: Sequence[int]) -> int:
    return math.prod(math.comb(library_size, c) for c in capacities)


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "exhaustive_cache":
            n = placement_count(self.params["library_size"], self.params["capacities"])
            if n > EXHAUSTIVE_LIMIT:
                raise ValueError(f"{n} joint placements exceed the enumeration limit")


class RandomPolicy:
    """Uniform facility, uniform power factor, uniformly random distinct cache sets."""

    def __init__(self, env):
        self.env = env

    def _raw(self, env, rng: np.random.Generator) -> np.ndarray:
        if isinstance(env, CentralizedEnv):
            return self._raw(env.inner, rng).reshape(1, -1)
        if isinstance(env, ResourceEnv):
            F = env.cfg.num_facilities
            raw = np.zeros((env.num_agents, F + 1))
            raw[np.arange(env.num_agents), rng.integers(0, F, env.num_agents)] = 1.0
            raw[:, F] = rng.random(env.num_agents)
            return raw
        if isinstance(env, CacheEnv):
            # continuous scores never tie, so the top-k set is a uniform subset
            return rng.random((env.num_agents, env.act_dim))
        raise TypeError(f"no random policy for {type(env).__name__}")

    def __call__(self, obs, rng: np.random.Generator) -> np.ndarray:
        return self._raw(self.env, rng)


def random_policy(env, rng: np.random.Generator) -> np.ndarray:
    """One joint random action for ``env``."""
    return RandomPolicy(env)(None, rng)


def greedy_popularity_cache(pop: ZipfPopularity, capacity: int) -> frozenset[int]:
    """The ``capacity`` most popular files."""
    if capacity > pop.library_size:
        raise ValueError("capacity exceeds library size")
    return frozenset(range(1, capacity + 1))


@dataclass
class OracleResult:
    placement: tuple[frozenset[int], ...]
    value: float
    table: list[tuple[tuple[frozenset[int], ...], float]]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["placement", "expected_value"])
            for placement, value in self.table:
                cells = ";".join("|".join(str(u) for u in sorted(p)) for p in placement)
                writer.writerow([cells, repr(value)])


def exhaustive_cache_oracle(evaluate: Callable[[tuple[frozenset[int], ...]], float],
                            library_size: int, capacities: Sequence[int]) -> OracleResult:
    """Score every joint placement; first maximum in lexicographic order wins."""
    if placement_count(library_size, capacities) > EXHAUSTIVE_LIMIT:
        raise ValueError("instance too large for exhaustive search")
    files = range(1, library_size + 1)
    per_facility = [[frozenset(c) for c in itertools.combinations(files, cap)] for cap in capacities]
    best, best_value, table = None, -math.inf, []
    for placement in itertools.product(*per_facility):
        value = float(evaluate(placement))
        table.append((placement, value))
        if value > best_value:
            best, best_value = placement, value
    return OracleResult(best, best_value, table)


# -- frozen association for the cache problem ------------------------------------

def nearest_bs_association(cfg: NetworkConfig, topo: Topology, beta: float = 0.05):
    """Greedy shortest-distance user-to-BS matching under BS capacity.

    Users that find every BS full stay unassociated. Returns ``(facility, beta)``.
    """
    n = cfg.num_users
    facility = np.full(n, UNASSOCIATED)
    load = np.zeros(cfg.num_bs, dtype=int)
    order = np.argsort(topo.bs_distance, axis=None, kind="stable")
    for flat in order:
        user, bs = divmod(int(flat), cfg.num_bs)
        if facility[user] == UNASSOCIATED and load[bs] < cfg.bs_capacity:
            facility[user] = bs
            load[bs] += 1
    return facility, np.full(n, float(beta))


def frozen_from_actor(env: ResourceEnv, trainer: MADDPG, seed: int = 0):
    """Association and power factors a trained resource policy settles on.

    Runs one noise-free episode and returns the final slot's repaired state.
    """
    obs = env.reset(seed)
    for _ in range(env.episode_length):
        res = env.step(trainer.select_action(obs, 0.0))
        obs = res.obs
        if res.done:
            break
    return env.state.facility.copy(), env.state.beta.copy()


# -- analytic cache evaluation ---------------------------------------------------

class CacheEvaluator:
    """Expected cache-env reward of a placement, analytic in the Zipf hit law.

    Per-user rates are averaged over ``samples`` seeded fading draws once;
    a placement then only changes each user's hit probability.
    """

    def __init__(self, env: CacheEnv, samples: int = 200, seed: int = 12345):
        cfg = env.cfg
        self.env = env
        rng = np.random.default_rng(seed)
        state = NetworkState(env.state.facility.copy(), env.state.beta.copy(),
                             [frozenset()] * cfg.num_facilities, np.zeros(cfg.num_users, dtype=int))
        total = np.zeros(cfg.num_users)
        for _ in range(samples):
            ch = realize_channels(cfg, env.topology, rng, env.sat_links)
            total += system_metrics(state, ch, cfg).rate
        rate = total / samples
        p = state.powers(cfg)
        fac = state.facility
        on_bs = (fac >= 0) & (fac < cfg.num_bs)
        on_sat = fac >= cfg.num_bs
        hit_p = np.where(on_bs, p + cfg.p_retrieve_bs, p + cfg.p_retrieve_sat)
        miss_p = np.where(on_bs, p + cfg.p_retrieve_core, p + cfg.p_retrieve_sat_core)
        if not cfg.sat_ee_retrieval:
            hit_p = np.where(on_sat, p, hit_p)
            miss_p = np.where(on_sat, p, miss_p)
        served = fac >= 0
        safe = lambda d: np.where(d > 0, d, 1.0)
        self.ee_hit = np.where(served & (rate > 0), rate / safe(hit_p), 0.0)
        self.ee_miss = np.where(served & (rate > 0), rate / safe(miss_p), 0.0)
        self.facility = fac
        self.served = served

    def hit_probability(self, placement) -> np.ndarray:
        pop = self.env.popularity
        mass = np.array([pop.mass(p) for p in placement])
        return np.where(self.served, mass[np.where(self.served, self.facility, 0)], 0.0)

    def expected_reward(self, placement) -> float:
        q = self.hit_probability(placement)
        return float((q * self.ee_hit + (1 - q) * self.ee_miss).sum())

    def expected_hit_rate(self, placement) -> float:
        if not self.served.any():
            return 0.0
        return float(self.hit_probability(placement)[self.served].mean())

    __call__ = expected_reward


# -- single-agent DDPG -------------------------------------------------------------

def ddpg_single(env, cfg: TrainConfig, **kwargs) -> TrainResult:
    """One centralised agent controlling every user's (or facility's) action."""
    return train(CentralizedEnv(env), cfg, role="central", **kwargs)
