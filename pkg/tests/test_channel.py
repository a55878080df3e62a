import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import jv

from satnoma.channel import (ChannelRealization, bessel_j, bs_link_coeff, realize_channels,
                             sat_beam_gain, sat_gain_matrix, sat_link_coeff, sat_link_matrix)
from satnoma.config import NetworkConfig, desk_config
from satnoma.link import system_metrics
from satnoma.topology import NetworkState, generate_topology

# G(theta_3dB) / G_max; scipy's jv gives the same value to every printed digit
HALF_POWER_RATIO = 0.5000004083327869


def test_bessel_known_values():
    assert bessel_j(1, 0.0) == 0.0
    assert bessel_j(0, 0.0) == 1.0
    assert bessel_j(1, 1.0) == pytest.approx(0.4400505857449335, rel=1e-14)
    assert bessel_j(3, 1.0) == pytest.approx(0.019563353982668407, rel=1e-14)


@pytest.mark.parametrize("order", [0, 1, 2, 3])
def test_bessel_matches_scipy(order):
    # absolute tolerance near zeros of J, relative elsewhere
    for x in np.linspace(-30, 45, 301):
        assert bessel_j(order, x) == pytest.approx(jv(order, x), rel=1e-9, abs=1e-13)


def test_bessel_recurrence():
    worst = 0.0
    for x in np.linspace(0.1, 20.0, 400):
        for n in (1, 2):
            lhs = bessel_j(n + 1, x)
            rhs = 2 * n / x * bessel_j(n, x) - bessel_j(n - 1, x)
            scale = max(abs(bessel_j(k, x)) for k in (n - 1, n, n + 1))
            worst = max(worst, abs(lhs - rhs) / scale)
    assert worst < 1e-10


@pytest.mark.parametrize("order,x", [(4, 1.0), (1, 50.0), (0, float("nan"))])
def test_bessel_domain(order, x):
    with pytest.raises(ValueError):
        bessel_j(order, x)


def test_boresight_gain():
    assert sat_beam_gain(0.0, 0.07, 1000.0) == 1000.0
    assert abs(sat_beam_gain(1e-9, 0.07, 1000.0) - 1000.0) / 1000.0 < 1e-6
    assert sat_beam_gain(1e-3, 0.07, 1000.0) <= 1000.0


def test_half_power_point():
    assert sat_beam_gain(0.07, 0.07, 1.0) == pytest.approx(HALF_POWER_RATIO, rel=1e-12)
    lam = 2.07123
    oracle = (jv(1, lam) / (2 * lam) + 36 * jv(3, lam) / lam ** 3) ** 2
    assert sat_beam_gain(0.07, 0.07, 1.0) == pytest.approx(oracle, rel=1e-12)


def test_sat_link_magnitude():
    cfg = NetworkConfig(g_max=1.0, rx_gain=1.0)
    d0 = cfg.light_speed / (4 * math.pi * cfg.carrier_freq)
    assert abs(sat_link_coeff(cfg, d0, 0.0)) == pytest.approx(1.0, rel=1e-15)
    assert abs(sat_link_coeff(cfg, 2 * d0, 0.0)) == pytest.approx(0.5, rel=1e-15)
    with pytest.raises(ValueError):
        sat_link_coeff(cfg, 0.0, 0.0)


@given(st.floats(-10, 10))
def test_doppler_rotates_phase_only(doppler):
    base = NetworkConfig()
    a = sat_link_coeff(base, 6e5, 0.01)
    b = sat_link_coeff(base.replace(doppler=doppler), 6e5, 0.01)
    assert abs(b) == pytest.approx(abs(a), rel=1e-15)


@given(st.floats(1e3, 1e7), st.floats(1.01, 3.0))
def test_sat_magnitude_decreasing_in_distance(d, factor):
    cfg = NetworkConfig()
    assert abs(sat_link_coeff(cfg, d * factor, 0.02)) < abs(sat_link_coeff(cfg, d, 0.02))


def test_rayleigh_power_mean():
    g = bs_link_coeff(np.random.default_rng(3), np.ones(100_000), 3.0)
    assert np.mean(np.abs(g) ** 2) == pytest.approx(1.0, abs=0.02)
    one = bs_link_coeff(np.random.default_rng(5), 1.0, 3.0)
    assert one == bs_link_coeff(np.random.default_rng(5), 1.0, 3.0)


def test_rayleigh_pathloss():
    a = bs_link_coeff(np.random.default_rng(1), 1.0, 3.0)
    b = bs_link_coeff(np.random.default_rng(1), 2.0, 3.0)
    assert abs(b) ** 2 == pytest.approx(abs(a) ** 2 / 8.0, rel=1e-14)
    with pytest.raises(ValueError):
        bs_link_coeff(np.random.default_rng(1), -1.0, 3.0)


def test_realize_channels():
    cfg = desk_config()
    topo = generate_topology(cfg, np.random.default_rng(0))
    a = realize_channels(cfg, topo, np.random.default_rng(9))
    static = sat_link_matrix(cfg, topo), sat_gain_matrix(cfg, topo)
    b = realize_channels(cfg, topo, np.random.default_rng(9), static)
    assert a.gain_bs.shape == (cfg.num_users, cfg.num_bs)
    assert a.gain_sat.shape == (cfg.num_users, cfg.num_sat)
    assert np.all(a.gain_bs > 0) and np.all(a.gain_sat > 0)
    assert np.array_equal(a.g_bs, b.g_bs) and np.array_equal(a.h_sat, b.h_sat)
    assert np.allclose(a.gain_sat, np.abs(a.h_sat) ** 2, rtol=1e-14, atol=0)


def test_doppler_leaves_sinr_bit_exact():
    cfg = desk_config()
    topo = generate_topology(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(4)
    facility = rng.integers(-1, cfg.num_facilities, cfg.num_users)
    state = NetworkState(facility, rng.random(cfg.num_users), [frozenset()] * cfg.num_facilities,
                         np.ones(cfg.num_users, dtype=int))
    runs = []
    for doppler in (0.0, 0.37, 1.0):
        c = cfg.replace(doppler=doppler)
        ch = realize_channels(c, topo, np.random.default_rng(11))
        runs.append(system_metrics(state, ch, c).sinr)
    assert np.array_equal(runs[0], runs[1]) and np.array_equal(runs[0], runs[2])


def test_from_gains_roundtrip():
    ch = ChannelRealization.from_gains([[4.0]], [[0.25]])
    assert ch.gain_bs[0, 0] == 4.0 and abs(ch.h_sat[0, 0]) == 0.5
