"""Node placement, per-user transmit power and the association matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import NetworkConfig

UNASSOCIATED = -1


@dataclass(frozen=True)
class Topology:
    bs_positions: np.ndarray      # (M, 2) ground coordinates, m
    sat_positions: np.ndarray     # (K, 3) sub-satellite point + altitude, m
    user_positions: np.ndarray    # (N, 2)
    bs_distance: np.ndarray       # (N, M) 3-D distance user <-> BS
    sat_distance: np.ndarray      # (N, K) slant range user <-> satellite
    sat_angle: np.ndarray         # (N, K) off-boresight angle, rad

    @property
    def num_users(self) -> int:
        return self.user_positions.shape[0]


def generate_topology(cfg: NetworkConfig, rng: np.random.Generator) -> Topology:
    """Uniform BS/user drop in the square; satellites straight above a jittered point.

    BS antennas sit ``bs_height`` above ground, which also floors the BS-user
    distance so the ``d**-xi`` pathloss stays finite.
    """
    side = cfg.area_side
    bs = rng.uniform(0.0, side, size=(cfg.num_bs, 2))
    users = rng.uniform(0.0, side, size=(cfg.num_users, 2))
    centre = np.full(2, side / 2.0)
    half = cfg.sat_offset_side / 2.0
    sat_ground = centre + rng.uniform(-half, half, size=(cfg.num_sat, 2))
    sats = np.column_stack([sat_ground, np.full(cfg.num_sat, cfg.sat_altitude)])

    horiz_bs = np.linalg.norm(users[:, None, :] - bs[None, :, :], axis=-1)
    bs_distance = np.hypot(horiz_bs, cfg.bs_height)
    horiz_sat = np.linalg.norm(users[:, None, :] - sat_ground[None, :, :], axis=-1)
    sat_distance = np.hypot(horiz_sat, cfg.sat_altitude)
    sat_angle = np.arctan2(horiz_sat, cfg.sat_altitude)
    return Topology(bs, sats, users, bs_distance, sat_distance, sat_angle)


def transmit_power(beta, p_max: float, capacity: int):
    """Per-user power ``beta * p_max / capacity``; works on scalars and arrays."""
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    b = np.asarray(beta, dtype=float)
    if np.any((b < 0.0) | (b > 1.0)) or np.any(np.isnan(b)):
        raise ValueError("power control factor must lie in [0, 1]")
    out = b * (p_max / capacity)
    return float(out) if out.ndim == 0 else out


def user_powers(cfg: NetworkConfig, facility: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Transmit power of every user given its facility; 0 for unassociated users."""
    facility = np.asarray(facility)
    p_bs = transmit_power(beta, cfg.p_bs_max, cfg.bs_capacity)
    p_sat = transmit_power(beta, cfg.p_sat_max, cfg.sat_capacity)
    return np.where(facility < 0, 0.0, np.where(facility < cfg.num_bs, p_bs, p_sat))


def association_matrix(facility: np.ndarray, num_facilities: int) -> np.ndarray:
    """Binary user x facility matrix; BS columns first, satellites after."""
    facility = np.asarray(facility)
    alpha = np.zeros((facility.size, num_facilities), dtype=np.int8)
    rows = np.flatnonzero(facility >= 0)
    alpha[rows, facility[rows]] = 1
    return alpha


@dataclass
class NetworkState:
    """The simulator's mutable world for one slot.

    ``facility[n]`` is the serving facility index (BSs first, then
    satellites) or ``UNASSOCIATED``; ``pools[f]`` is facility ``f``'s cached
    file set (1-based file ids); ``requests[n]`` is the file user ``n`` asked
    for, 0 meaning no request.
    """

    facility: np.ndarray
    beta: np.ndarray
    pools: list[frozenset[int]]
    requests: np.ndarray

    @classmethod
    def empty(cls, cfg: NetworkConfig) -> "NetworkState":
        n = cfg.num_users
        return cls(np.full(n, UNASSOCIATED), np.zeros(n),
                   [frozenset() for _ in range(cfg.num_facilities)], np.zeros(n, dtype=int))

    def hits(self) -> np.ndarray:
        out = np.zeros(self.facility.size, dtype=np.int8)
        for n, (f, req) in enumerate(zip(self.facility, self.requests)):
            if f >= 0 and req in self.pools[f]:
                out[n] = 1
        return out

    def powers(self, cfg: NetworkConfig) -> np.ndarray:
        return user_powers(cfg, self.facility, self.beta)
