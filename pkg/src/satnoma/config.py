"""Scenario and training configuration.

Both configs are frozen dataclasses. Every field has a documented default so a
JSON file only needs the keys it overrides; ``resolved_dict`` writes the full
set back out for reproducibility.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)

ZIPF_RANGE = (0.56, 0.83)


class ConfigError(ValueError):
    """Raised when a config violates one or more invariants."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class NetworkConfig:
    # topology counts
    num_bs: int = 6
    num_sat: int = 2
    num_bs_users: int = 24
    num_sat_users: int = 8
    bs_capacity: int = 5
    sat_capacity: int = 5
    # powers (W)
    p_bs_max: float = 20.0
    p_sat_max: float = 20.0
    noise_density: float = 1e-10
    # propagation
    pathloss_exponent: float = 3.0
    carrier_freq: float = 2e9
    light_speed: float = 299_792_458.0
    g_max: float = 1000.0
    rx_gain: float = 1.0
    theta_3db: float = 0.07
    doppler: float = 0.0
    # geometry (m)
    area_side: float = 500.0
    bs_height: float = 10.0
    sat_altitude: float = 600e3
    sat_offset_side: float = 20e3
    # content library
    library_size: int = 40
    file_size_bits: float = 1e6
    zipf_exponent: float = 0.8
    bs_cache_capacity: int = 3
    sat_cache_capacity: int = 3
    # retrieval powers (W)
    p_retrieve_bs: float = 0.01
    p_retrieve_core: float = 0.05
    p_retrieve_sat: float = 0.02
    p_retrieve_sat_core: float = 0.1
    # delays (s)
    delay_bs_backhaul: float = 0.05
    delay_sat_backhaul: float = 0.25
    delay_cache_hit: float = 0.005
    # model switches
    sic_mode: bool = False
    extended_obs: bool = False
    sat_ee_retrieval: bool = False
    episode_length: int = 100
    seed: int = 0

    @property
    def num_users(self) -> int:
        return self.num_bs_users + self.num_sat_users

    @property
    def num_facilities(self) -> int:
        return self.num_bs + self.num_sat

    def capacity_of(self, facility: int) -> int:
        return self.bs_capacity if facility < self.num_bs else self.sat_capacity

    def cache_capacity_of(self, facility: int) -> int:
        return self.bs_cache_capacity if facility < self.num_bs else self.sat_cache_capacity

    def replace(self, **changes: Any) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    gamma: float = 0.95
    batch_size: int = 10
    buffer_capacity: int = 50_000
    tau: float = 0.01
    noise_init: float = 0.3
    noise_floor: float = 0.01
    noise_decay_frac: float = 0.6
    episodes: int = 1000
    steps: int = 100
    hidden: tuple[int, ...] = (64, 64)
    grad_clip: float = 10.0
    action_reg: float = 0.1
    # critic-only updates before the actors start following the critic
    actor_warmup: int = 2000
    seed: int = 0

    def replace(self, **changes: Any) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def noise_scale(self, episode: int) -> float:
        """Exponential decay from ``noise_init`` to ``noise_floor``."""
        horizon = self.noise_decay_frac * self.episodes
        if horizon <= 0 or episode >= horizon or self.noise_init == self.noise_floor:
            return self.noise_floor
        ratio = self.noise_floor / self.noise_init
        return self.noise_init * ratio ** (episode / horizon)


_COUNT_FIELDS = (
    "num_bs", "num_sat", "num_bs_users", "num_sat_users", "bs_capacity",
    "sat_capacity", "library_size", "bs_cache_capacity", "sat_cache_capacity",
    "episode_length",
)
_POSITIVE_FIELDS = (
    "p_bs_max", "p_sat_max", "noise_density", "carrier_freq", "light_speed",
    "g_max", "rx_gain", "theta_3db", "sat_altitude", "file_size_bits",
    "zipf_exponent", "p_retrieve_bs", "p_retrieve_core", "p_retrieve_sat",
    "p_retrieve_sat_core", "delay_bs_backhaul", "delay_sat_backhaul",
    "delay_cache_hit", "pathloss_exponent", "bs_height",
)


def config_errors(cfg: NetworkConfig, *, allow_full_cache: bool = False) -> list[str]:
    """Return one message per violated invariant; empty when valid."""
    errors = []
    for name in _COUNT_FIELDS:
        if getattr(cfg, name) < 1:
            errors.append(f"{name} must be >= 1")
    for name in _POSITIVE_FIELDS:
        value = getattr(cfg, name)
        if not (math.isfinite(value) and value > 0):
            errors.append(f"{name} must be positive")
    for name in ("area_side", "sat_offset_side"):
        if getattr(cfg, name) < 0:
            errors.append(f"{name} must be non-negative")
    if not 0 < cfg.theta_3db < math.pi / 2:
        errors.append("theta_3db must lie in (0, pi/2)")
    for name in ("bs_cache_capacity", "sat_cache_capacity"):
        cap = getattr(cfg, name)
        if allow_full_cache:
            if cap > cfg.library_size:
                errors.append(f"{name}: cache must not exceed library")
        elif cap >= cfg.library_size:
            errors.append(f"{name}: cache must be strictly smaller than library")
    return errors


def train_config_errors(tc: TrainConfig) -> list[str]:
    errors = []
    if not 0.0 <= tc.gamma <= 1.0:
        errors.append("gamma must lie in [0, 1]")
    if not 0.0 < tc.tau <= 1.0:
        errors.append("tau must lie in (0, 1]")
    if tc.lr <= 0:
        errors.append("lr must be positive")
    if tc.batch_size < 1 or tc.buffer_capacity < 1:
        errors.append("batch_size and buffer_capacity must be >= 1")
    elif tc.batch_size > tc.buffer_capacity:
        errors.append("batch_size must not exceed buffer_capacity")
    if tc.episodes < 1 or tc.steps < 1:
        errors.append("episodes and steps must be >= 1")
    if tc.actor_warmup < 0:
        errors.append("actor_warmup must be >= 0")
    if not 0.0 <= tc.noise_floor <= tc.noise_init:
        errors.append("noise scales must satisfy 0 <= noise_floor <= noise_init")
    return errors


def config_warnings(cfg: NetworkConfig) -> list[str]:
    lo, hi = ZIPF_RANGE
    if not lo <= cfg.zipf_exponent <= hi:
        return [f"zipf_exponent {cfg.zipf_exponent} outside the usual [{lo}, {hi}] range"]
    return []


def validate_config(cfg: NetworkConfig, *, allow_full_cache: bool = False) -> NetworkConfig:
    """Return ``cfg`` unchanged, or raise :class:`ConfigError` listing every problem.

    ``allow_full_cache`` admits cache capacity equal to the library size. It
    exists for saturation experiments only.
    """
    errors = config_errors(cfg, allow_full_cache=allow_full_cache)
    if errors:
        raise ConfigError(errors)
    for msg in config_warnings(cfg):
        logger.warning(msg)
    return cfg


def desk_config(**overrides: Any) -> NetworkConfig:
    """Small instance used by the acceptance runs: 12 users, 3 BSs, 1 satellite."""
    base = dict(num_bs=3, num_sat=1, num_bs_users=9, num_sat_users=3,
                bs_capacity=3, sat_capacity=3)
    base.update(overrides)
    return NetworkConfig(**base)


def tiny_cache_config(**overrides: Any) -> NetworkConfig:
    """One BS, one satellite, three users, five files, two cache slots, Zipf exponent 1."""
    base = dict(num_bs=1, num_sat=1, num_bs_users=2, num_sat_users=1, bs_capacity=3,
                sat_capacity=3, library_size=5, bs_cache_capacity=2, sat_cache_capacity=2,
                zipf_exponent=1.0)
    base.update(overrides)
    return NetworkConfig(**base)


def users_per_facility_config(users: int, **overrides: Any) -> NetworkConfig:
    """Desk geometry with ``users`` users sharing each facility (capacity = users)."""
    base = desk_config(**overrides)
    facilities = base.num_facilities
    total = users * facilities
    n_sat = users * base.num_sat
    return base.replace(num_bs_users=total - n_sat, num_sat_users=n_sat,
                        bs_capacity=users, sat_capacity=users)


# -- JSON I/O ---------------------------------------------------------------

def _coerce(cls, data: dict[str, Any]):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError([f"unknown key {k!r}" for k in unknown])
    kwargs = {}
    for key, value in data.items():
        if key == "hidden":
            value = tuple(int(v) for v in value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path: str | Path) -> tuple[NetworkConfig, TrainConfig]:
    """Load a config file.

    The file holds an object with optional ``network`` and ``train`` sections.
    Network keys may also sit at the top level. Missing keys take defaults.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a JSON object"])
    raw = dict(raw)
    train_raw = raw.pop("train", {})
    net_raw = raw.pop("network", {})
    net_raw = {**raw, **net_raw}
    return _coerce(NetworkConfig, net_raw), _coerce(TrainConfig, train_raw)


def resolved_dict(net: NetworkConfig, train: TrainConfig | None = None) -> dict[str, Any]:
    out: dict[str, Any] = {"network": dataclasses.asdict(net)}
    if train is not None:
        t = dataclasses.asdict(train)
        t["hidden"] = list(t["hidden"])
        out["train"] = t
    return out


def save_resolved(path: str | Path, net: NetworkConfig, train: TrainConfig | None = None) -> None:
    Path(path).write_text(json.dumps(resolved_dict(net, train), indent=2, sort_keys=True) + "\n")
