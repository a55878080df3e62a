"""Zipf popularity, cache pools, hit indicators, caching reward and power."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .config import NetworkConfig

BS_TIER = "bs"
SAT_TIER = "sat"


@dataclass(frozen=True)
class ZipfPopularity:
    pmf: np.ndarray   # pmf[u - 1] is the request probability of file u
    exponent: float

    @property
    def library_size(self) -> int:
        return self.pmf.size

    def mass(self, files: Iterable[int]) -> float:
        """Probability that one request lands in ``files``."""
        idx = np.fromiter((u - 1 for u in files), dtype=int)
        return float(self.pmf[idx].sum()) if idx.size else 0.0


@dataclass(frozen=True)
class CachePool:
    owner: int
    capacity: int
    files: frozenset[int]

    def __post_init__(self):
        if len(self.files) > self.capacity:
            raise ValueError(f"pool of facility {self.owner} exceeds capacity {self.capacity}")

    def __contains__(self, item: int) -> bool:
        return item in self.files


@dataclass(frozen=True)
class RequestBatch:
    files: np.ndarray                 # requested file per user, 1-based
    hits: np.ndarray | None = None    # J per user, set once pools are known

    def with_hits(self, hits) -> "RequestBatch":
        return RequestBatch(self.files, np.asarray(hits, dtype=np.int8))


def zipf_pmf(library_size: int, exponent: float) -> ZipfPopularity:
    if library_size < 1:
        raise ValueError("library must hold at least one file")
    if exponent <= 0:
        raise ValueError("Zipf exponent must be positive")
    ranks = np.arange(1, library_size + 1, dtype=float)
    weights = ranks ** (-exponent)
    return ZipfPopularity(weights / weights.sum(), float(exponent))


def sample_requests(pop: ZipfPopularity, num_users: int, rng: np.random.Generator) -> RequestBatch:
    """I.i.d. file requests drawn from the popularity law."""
    cdf = np.cumsum(pop.pmf)
    cdf[-1] = 1.0
    files = np.searchsorted(cdf, rng.random(num_users), side="right") + 1
    return RequestBatch(np.minimum(files, pop.library_size))


def hit_indicator(request: int, pool) -> int:
    return int(request in pool)


def cache_delay_reward(hit: int, size_bits: float, delay: float) -> float:
    """Bits per second saved by serving from the local cache.

    ``delay`` is the BS backhaul delay for terrestrial users and the gateway
    delay for satellite users.
    """
    if delay <= 0:
        raise ValueError("backhaul delay must be positive")
    return hit * size_bits / delay


def tier_delay(cfg: NetworkConfig, tier: str) -> float:
    return cfg.delay_bs_backhaul if tier == BS_TIER else cfg.delay_sat_backhaul


def cache_hit_rate(hits) -> float:
    hits = np.asarray(hits)
    if hits.size == 0:
        raise ValueError("hit rate of an empty batch is undefined")
    return float(hits.sum() / hits.size)


def total_user_power(tier: str, p_tx, hit, cfg: NetworkConfig):
    """Transmit power plus cache or core-network retrieval power."""
    if tier == BS_TIER:
        local, core = cfg.p_retrieve_bs, cfg.p_retrieve_core
    elif tier == SAT_TIER:
        local, core = cfg.p_retrieve_sat, cfg.p_retrieve_sat_core
    else:
        raise ValueError(f"unknown tier {tier!r}")
    hit = np.asarray(hit)
    return p_tx + (1 - hit) * core + hit * local


def top_files(scores, capacity: int) -> frozenset[int]:
    """Highest-scoring ``capacity`` files; ties go to the lower file id."""
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    return frozenset(int(i) + 1 for i in order[:capacity])
