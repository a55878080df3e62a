"""Terrestrial Rayleigh links and satellite links with a Bessel beam pattern."""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal, localcontext

import numpy as np

from .config import NetworkConfig
from .topology import Topology

LAMBDA_SCALE = 2.07123
_BESSEL_ORDERS = (0, 1, 2, 3)
_BESSEL_XMAX = 50.0
_SERIES_RTOL = Decimal("1e-15")
# the alternating series cancels roughly e**|x| worth of digits near |x| = 50
_SERIES_PREC = 60


def bessel_j(order: int, x: float) -> float:
    """Bessel function of the first kind ``J_order(x)`` by power series.

    Terms are accumulated in 60-digit decimal arithmetic so the cancellation
    between large alternating terms does not reach the returned double.
    """
    if order not in _BESSEL_ORDERS:
        raise ValueError(f"order must be one of {_BESSEL_ORDERS}")
    x = float(x)
    if not abs(x) < _BESSEL_XMAX:
        raise ValueError(f"|x| must be < {_BESSEL_XMAX}")
    if x == 0.0:
        return 1.0 if order == 0 else 0.0
    with localcontext() as ctx:
        ctx.prec = _SERIES_PREC
        half = Decimal(x) / 2
        half_sq = half * half
        term = half ** order / math.factorial(order)
        total = term
        peak = abs(x) / 2
        k = 0
        while True:
            k += 1
            term = -term * half_sq / (k * (k + order))
            total += term
            if k > peak and abs(term) <= _SERIES_RTOL * abs(total):
                break
            if k > 400:  # unreachable for |x| < 50
                raise ArithmeticError("Bessel series failed to converge")
        return float(total)


def sat_beam_gain(theta: float, theta_3db: float, g_max: float) -> float:
    """Linear satellite antenna gain at off-boresight angle ``theta``."""
    if theta_3db <= 0:
        raise ValueError("theta_3db must be positive")
    if theta == 0.0:
        return float(g_max)
    lam = LAMBDA_SCALE * math.sin(theta) / math.sin(theta_3db)
    bracket = bessel_j(1, lam) / (2.0 * lam) + 36.0 * bessel_j(3, lam) / lam ** 3
    return g_max * bracket * bracket


def sat_link_gain(cfg: NetworkConfig, d: float, theta: float) -> float:
    """Squared magnitude of the satellite channel; independent of the Doppler phase."""
    if d <= 0:
        raise ValueError("distance must be positive")
    gain = sat_beam_gain(theta, cfg.theta_3db, cfg.g_max)
    return gain * cfg.rx_gain * (cfg.light_speed / (4.0 * math.pi * cfg.carrier_freq * d)) ** 2


def sat_link_coeff(cfg: NetworkConfig, d: float, theta: float) -> complex:
    """Complex satellite channel: free-space amplitude with beam gain, Doppler phase."""
    magnitude = math.sqrt(sat_link_gain(cfg, d, theta))
    return magnitude * complex(math.cos(math.pi * cfg.doppler), math.sin(math.pi * cfg.doppler))


def bs_link_coeff(rng: np.random.Generator, d, xi: float):
    """Rayleigh-faded terrestrial channel ``sqrt(g_hat * d**-xi)`` with uniform phase.

    ``g_hat`` is the squared magnitude of a unit-power circular Gaussian, i.e.
    unit-mean exponential. Accepts a scalar or an array of distances.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    re = rng.standard_normal(d.shape)
    im = rng.standard_normal(d.shape)
    z = (re + 1j * im) / math.sqrt(2.0)
    g = z * np.sqrt(d ** (-xi))
    return complex(g) if g.ndim == 0 else g


@dataclass(frozen=True)
class ChannelRealization:
    g_bs: np.ndarray    # (N, M) complex
    h_sat: np.ndarray   # (N, K) complex
    gain_bs: np.ndarray   # |g|^2
    gain_sat: np.ndarray  # |h|^2

    @classmethod
    def from_coefficients(cls, g_bs: np.ndarray, h_sat: np.ndarray,
                          gain_sat: np.ndarray | None = None) -> "ChannelRealization":
        """``gain_sat`` overrides ``|h_sat|**2``, whose last bit depends on the phase."""
        g_bs = np.asarray(g_bs, dtype=complex)
        h_sat = np.asarray(h_sat, dtype=complex)
        if gain_sat is None:
            gain_sat = np.abs(h_sat) ** 2
        return cls(g_bs, h_sat, np.abs(g_bs) ** 2, np.asarray(gain_sat, dtype=float))

    @classmethod
    def from_gains(cls, gain_bs, gain_sat) -> "ChannelRealization":
        """Build a realization with zero-phase links of the given power gains."""
        gain_bs = np.asarray(gain_bs, dtype=float)
        gain_sat = np.asarray(gain_sat, dtype=float)
        return cls(np.sqrt(gain_bs).astype(complex), np.sqrt(gain_sat).astype(complex),
                   gain_bs, gain_sat)


def sat_link_matrix(cfg: NetworkConfig, topo: Topology) -> np.ndarray:
    """Deterministic (N, K) satellite coefficients; fixed for a topology."""
    return _per_link(sat_link_coeff, cfg, topo, complex)


def sat_gain_matrix(cfg: NetworkConfig, topo: Topology) -> np.ndarray:
    """Deterministic (N, K) satellite power gains."""
    return _per_link(sat_link_gain, cfg, topo, float)


def _per_link(fn, cfg, topo, dtype):
    n, k = topo.sat_distance.shape
    out = np.empty((n, k), dtype=dtype)
    for i in range(n):
        for j in range(k):
            out[i, j] = fn(cfg, topo.sat_distance[i, j], topo.sat_angle[i, j])
    return out


def realize_channels(cfg: NetworkConfig, topo: Topology, rng: np.random.Generator,
                     sat_links: tuple[np.ndarray, np.ndarray] | None = None) -> ChannelRealization:
    """One block-fading slot: fresh Rayleigh draws for every user-BS pair.

    Pass ``sat_links = (sat_link_matrix(...), sat_gain_matrix(...))`` to skip
    recomputing the static satellite links.
    """
    g = bs_link_coeff(rng, topo.bs_distance, cfg.pathloss_exponent)
    if sat_links is None:
        sat_links = sat_link_matrix(cfg, topo), sat_gain_matrix(cfg, topo)
    h, gain = sat_links
    return ChannelRealization.from_coefficients(g, h, gain)
