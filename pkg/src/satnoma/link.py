"""SINR, achievable rate and energy efficiency of every user.

Interference sums follow the displayed downlink model literally: an
interfering user contributes its own received power ``|g_{n'}|^2 p_{n'}``.
Cross-tier terms reuse the other tier's link: a satellite user hits a BS
victim through its terrestrial channel to that BS, a BS user hits a satellite
victim through its satellite channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .caching import BS_TIER, SAT_TIER, total_user_power
from .channel import ChannelRealization
from .config import NetworkConfig
from .topology import NetworkState


@dataclass(frozen=True)
class LinkMetrics:
    sinr: np.ndarray
    rate: np.ndarray
    ee: np.ndarray
    intra: np.ndarray     # same BS / same satellite
    cross: np.ndarray     # other BSs / other satellites
    tier: np.ndarray      # the other tier
    hits: np.ndarray

    @property
    def objective(self) -> float:
        return float(self.ee.sum())


def _split(facility, cfg):
    facility = np.asarray(facility)
    on_bs = (facility >= 0) & (facility < cfg.num_bs)
    on_sat = facility >= cfg.num_bs
    return facility, on_bs, on_sat


def bs_user_sinr(user: int, channels: ChannelRealization, facility, powers,
                 cfg: NetworkConfig, sic_mode: bool = False) -> float:
    """SINR of one BS user; 0 when the user is not served by a BS.

    With ``sic_mode`` the user cancels co-cell users whose channel to the
    serving BS is weaker than its own, so only stronger co-cell users remain
    as intra-cell interference.
    """
    facility, on_bs, on_sat = _split(facility, cfg)
    m = facility[user]
    if not on_bs[user]:
        return 0.0
    G = channels.gain_bs
    signal = G[user, m] * powers[user]
    intra = cross = tier = 0.0
    for other in range(facility.size):
        if other == user:
            continue
        f = facility[other]
        if on_bs[other] and f == m:
            if sic_mode and G[other, m] <= G[user, m]:
                continue
            intra += G[other, m] * powers[other]
        elif on_bs[other]:
            cross += G[other, f] * powers[other]
        elif on_sat[other]:
            tier += G[other, m] * powers[other]
    return float(signal / (intra + cross + tier + cfg.noise_density))


def sat_user_sinr(user: int, channels: ChannelRealization, facility, powers,
                  cfg: NetworkConfig) -> float:
    """SINR of one satellite user; 0 when the user is not served by a satellite."""
    facility, on_bs, on_sat = _split(facility, cfg)
    if not on_sat[user]:
        return 0.0
    k = facility[user] - cfg.num_bs
    H = channels.gain_sat
    signal = H[user, k] * powers[user]
    interference = 0.0
    for other in range(facility.size):
        if other != user and (on_bs[other] or on_sat[other]):
            interference += H[other, k] * powers[other]
    return float(signal / (interference + cfg.noise_density))


def energy_efficiency(rate: float, p_tx: float, hit: int, tier: str, cfg: NetworkConfig) -> float:
    """Rate per watt of consumed power.

    BS users pay transmit plus retrieval power. Satellite users pay transmit
    power only unless ``cfg.sat_ee_retrieval`` is set. Zero retrieval powers
    reduce both to ``rate / p_tx``.
    """
    if rate < 0:
        raise ValueError("rate must be non-negative")
    if rate == 0:
        return 0.0
    if tier == BS_TIER or cfg.sat_ee_retrieval:
        power = float(total_user_power(tier, p_tx, hit, cfg))
    else:
        power = p_tx
    if power <= 0:
        raise ValueError("degenerate power")
    return rate / power


def interference_terms(channels: ChannelRealization, facility, powers, cfg: NetworkConfig,
                       sic_mode: bool = False):
    """Vectorised (signal, intra, cross, tier) arrays for every user."""
    facility, on_bs, on_sat = _split(facility, cfg)
    powers = np.asarray(powers, dtype=float)
    n = facility.size
    M, K = cfg.num_bs, cfg.num_sat
    G, H = channels.gain_bs, channels.gain_sat
    rows = np.arange(n)
    bs_idx = np.where(on_bs, facility, 0)
    sat_idx = np.where(on_sat, facility - M, 0)

    own_bs = np.where(on_bs, G[rows, bs_idx] * powers, 0.0)
    per_bs = np.bincount(bs_idx[on_bs], weights=own_bs[on_bs], minlength=M)
    sat_into_bs = (G * np.where(on_sat, powers, 0.0)[:, None]).sum(axis=0)       # (M,)
    bs_into_sat = (H * np.where(on_bs, powers, 0.0)[:, None]).sum(axis=0)        # (K,)
    sat_rx = H * np.where(on_sat, powers, 0.0)[:, None]                          # (N, K)
    sat_total = sat_rx.sum(axis=0)

    signal = np.zeros(n)
    intra = np.zeros(n)
    cross = np.zeros(n)
    tier = np.zeros(n)

    if on_bs.any():
        if sic_mode:
            same = on_bs[:, None] & on_bs[None, :] & (facility[:, None] == facility[None, :])
            own_gain = G[rows, bs_idx]
            stronger = own_gain[None, :] > own_gain[:, None]
            intra_bs = (same & stronger) @ own_bs
        else:
            intra_bs = per_bs[bs_idx] - own_bs
        signal = np.where(on_bs, own_bs, signal)
        intra = np.where(on_bs, intra_bs, intra)
        cross = np.where(on_bs, per_bs.sum() - per_bs[bs_idx], cross)
        tier = np.where(on_bs, sat_into_bs[bs_idx], tier)

    if on_sat.any():
        own_sat = H[rows, sat_idx] * powers
        # power received at satellite k from its own users
        on_k = np.zeros((n, K), dtype=bool)
        on_k[rows[on_sat], sat_idx[on_sat]] = True
        per_sat_own = (sat_rx * on_k).sum(axis=0)
        intra_sat = per_sat_own[sat_idx] - own_sat
        cross_sat = sat_total[sat_idx] - per_sat_own[sat_idx]
        signal = np.where(on_sat, own_sat, signal)
        intra = np.where(on_sat, intra_sat, intra)
        cross = np.where(on_sat, cross_sat, cross)
        tier = np.where(on_sat, bs_into_sat[sat_idx], tier)

    # rounding in the subtractions above may leave tiny negatives
    return signal, np.maximum(intra, 0.0), np.maximum(cross, 0.0), tier


def system_metrics(state: NetworkState, channels: ChannelRealization, cfg: NetworkConfig,
                   sic_mode: bool | None = None) -> LinkMetrics:
    """Per-user SINR, rate and energy efficiency; ``objective`` is their EE sum."""
    sic = cfg.sic_mode if sic_mode is None else sic_mode
    facility, on_bs, on_sat = _split(state.facility, cfg)
    powers = state.powers(cfg)
    signal, intra, cross, tier = interference_terms(channels, facility, powers, cfg, sic)
    sinr = signal / (intra + cross + tier + cfg.noise_density)
    rate = np.log2(1.0 + sinr)
    hits = state.hits()

    bs_power = total_user_power(BS_TIER, powers, hits, cfg)
    if cfg.sat_ee_retrieval:
        sat_power = total_user_power(SAT_TIER, powers, hits, cfg)
    else:
        sat_power = powers
    denom = np.where(on_bs, bs_power, np.where(on_sat, sat_power, 1.0))
    ee = np.where(rate > 0, rate / np.where(denom > 0, denom, 1.0), 0.0)
    return LinkMetrics(sinr, rate, ee, intra, cross, tier, hits)
