import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from satnoma.baselines import random_policy
from satnoma.caching import sample_requests
from satnoma.channel import realize_channels
from satnoma.config import NetworkConfig, desk_config, tiny_cache_config
from satnoma.env import CacheEnv, CentralizedEnv, ResourceEnv, check_constraints, repair_actions
from satnoma.topology import UNASSOCIATED, NetworkState

from oracles import ee_oracle


def test_repair_capacity_by_index():
    cfg = NetworkConfig(num_bs=1, num_sat=1, num_bs_users=2, num_sat_users=0, bs_capacity=1)
    raw = np.array([[1.0, 0.0, 0.5], [1.0, 0.0, 0.5]])
    facility, beta = repair_actions(raw, cfg)
    assert facility.tolist() == [0, UNASSOCIATED]
    assert beta.tolist() == [0.5, 0.5]


def test_repair_argmax_and_clip():
    cfg = NetworkConfig(num_bs=2, num_sat=1, num_bs_users=1, num_sat_users=0)
    facility, beta = repair_actions(np.array([[0.1, 0.9, 0.3, 1.7]]), cfg)
    assert facility.tolist() == [1] and beta.tolist() == [1.0]
    _, beta = repair_actions(np.array([[0.1, 0.9, 0.3, -2.0]]), cfg)
    assert beta.tolist() == [0.0]


@settings(max_examples=80)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 12), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_repair_always_feasible(num_bs, num_sat, users, cap, seed):
    cfg = NetworkConfig(num_bs=num_bs, num_sat=num_sat, num_bs_users=users, num_sat_users=0,
                        bs_capacity=cap, sat_capacity=cap)
    raw = np.random.default_rng(seed).normal(scale=3.0, size=(users, cfg.num_facilities + 1))
    facility, beta = repair_actions(raw, cfg)
    state = NetworkState(facility, beta, [frozenset()] * cfg.num_facilities, np.zeros(users, dtype=int))
    assert check_constraints(state, cfg) == []
    choice = raw[:, :-1].argmax(axis=1)
    for n in range(users):
        assert facility[n] in (choice[n], UNASSOCIATED)
        # a user is dropped only when every earlier slot at its choice is taken
        if facility[n] == UNASSOCIATED:
            assert np.sum(facility[:n] == choice[n]) == cfg.capacity_of(choice[n])


def test_constraint_audit_flags_problems():
    cfg = NetworkConfig(num_bs=1, num_sat=1, num_bs_users=2, num_sat_users=0, bs_capacity=1,
                        library_size=4, bs_cache_capacity=2, sat_cache_capacity=2)
    state = NetworkState(np.array([0, 0]), np.array([0.5, 1.2]),
                         [frozenset({1, 2, 3}), frozenset({9})], np.zeros(2, dtype=int))
    problems = " ".join(check_constraints(state, cfg))
    for word in ("serves", "power control", "caches 3", "unknown file"):
        assert word in problems


def test_reset_and_first_step():
    env = ResourceEnv(desk_config())
    obs = env.reset(0)
    assert obs.shape == (12, 1) and not obs.any()
    raw = np.zeros((12, env.act_dim))
    raw[:, 0] = 1.0
    raw[:, -1] = 1.0
    res = env.step(raw)
    assert res.rewards[3:].tolist() == [0.0] * 9           # BS 0 admits users 0-2 only
    assert np.all(res.rewards[:3] > 0)
    assert res.obs[:, 0].tolist() == [1.0] * 12           # ties at zero count as improvement


def test_step_matches_oracle():
    cfg = desk_config(num_bs_users=2, num_sat_users=1, seed=5)
    env = ResourceEnv(cfg)
    env.reset(3)
    rng = np.random.default_rng([cfg.seed, 3])
    actions = np.array([[0.0, 1.0, 0.0, 0.0, 0.7], [0.0, 1.0, 0.0, 0.0, 0.4], [0.0, 0.0, 0.0, 1.0, 0.9]])
    for _ in range(3):
        res = env.step(actions)
        ch = realize_channels(cfg, env.topology, rng)
        requests = sample_requests(env.popularity, cfg.num_users, rng).files
        p = env.state.powers(cfg)
        expected = ee_oracle(cfg, ch.gain_bs.tolist(), ch.gain_sat.tolist(), [1, 1, 3], p.tolist(), [0, 0, 0])
        assert np.array_equal(env.state.requests, requests)
        assert res.rewards == pytest.approx(expected, rel=1e-12)


def test_determinism_and_seed_dependence():
    def rollout(seed):
        env = ResourceEnv(desk_config())
        env.reset(seed)
        rng = np.random.default_rng(1)
        return np.array([env.step(random_policy(env, rng)).rewards for _ in range(5)])

    assert np.array_equal(rollout(4), rollout(4))
    assert not np.array_equal(rollout(4), rollout(5))


def test_episode_end():
    env = ResourceEnv(desk_config(episode_length=2))
    with pytest.raises(RuntimeError):
        env.step(np.zeros((12, env.act_dim)))
    env.reset(0)
    env.step(np.zeros((12, env.act_dim)))
    assert env.step(np.zeros((12, env.act_dim))).done
    with pytest.raises(RuntimeError):
        env.step(np.zeros((12, env.act_dim)))


def test_random_play_keeps_constraints():
    env = ResourceEnv(desk_config())
    rng = np.random.default_rng(0)
    for ep in range(3):
        env.reset(ep)
        for _ in range(env.episode_length):
            res = env.step(random_policy(env, rng))
            assert set(np.unique(res.obs)) <= {0.0, 1.0}
    assert env.violations == [] and env.steps_checked == 300


def test_extended_obs():
    env = ResourceEnv(desk_config(extended_obs=True))
    assert env.reset(0).shape == (12, 2)
    res = env.step(random_policy(env, np.random.default_rng(0)))
    assert np.array_equal(res.obs[:, 1], res.rewards)


def tiny_cache_env(**kw):
    cfg = tiny_cache_config(**kw)
    return CacheEnv(cfg, [0, 0, 1], [0.5, 0.5, 0.5])


def test_cache_env_basics():
    env = tiny_cache_env()
    assert env.num_agents == 2 and env.act_dim == 5
    env.reset(0)
    scores = np.array([[5, 4, 3, 2, 1], [0, 0, 0, 1, 2]], dtype=float)
    res = env.step(scores)
    assert env.state.pools == [frozenset({1, 2}), frozenset({4, 5})]
    assert res.rewards.sum() == pytest.approx(env._last_metrics.ee.sum(), rel=0, abs=0)


def test_facility_without_users_gets_nothing():
    env = CacheEnv(tiny_cache_config(), [0, 0, 0], [0.5, 0.5, 0.5])
    env.reset(0)
    assert env.step(np.ones((2, 5))).rewards[1] == 0.0


def test_missing_requested_file_is_a_miss():
    cfg = tiny_cache_config(bs_cache_capacity=4, sat_cache_capacity=4)
    env = CacheEnv(cfg, [0, 0, 1], [0.5, 0.5, 0.5])
    env.reset(0)
    env.step(np.ones((2, 5)))
    for n, req in enumerate(env.state.requests):
        scores = np.ones((2, 5))
        scores[:, req - 1] = 0.0
        env.reset(0)
        env.step(scores)
        assert env._last_metrics.hits[n] == 0


def test_cache_reward_both_branches():
    # one BS user plus one satellite user, two files: the BS reward is
    # rate / (p + retrieval) on either branch
    cfg = NetworkConfig(num_bs=1, num_sat=1, num_bs_users=1, num_sat_users=1, library_size=2,
                        bs_cache_capacity=1, sat_cache_capacity=1, zipf_exponent=1.0)
    env = CacheEnv(cfg, [0, 1], [1.0, 0.5])
    p = cfg.p_bs_max / cfg.bs_capacity
    p_sat = 0.5 * cfg.p_sat_max / cfg.sat_capacity
    seen = set()
    for seed in range(20):
        env.reset(seed)
        rng = np.random.default_rng([cfg.seed, seed])
        res = env.step(np.array([[1.0, 0.0], [1.0, 0.0]]))
        ch = realize_channels(cfg, env.topology, rng)
        rate = np.log2(1 + ch.gain_bs[0, 0] * p / (ch.gain_bs[1, 0] * p_sat + cfg.noise_density))
        hit = env.state.requests[0] == 1
        retrieval = cfg.p_retrieve_bs if hit else cfg.p_retrieve_core
        assert res.rewards[0] == pytest.approx(rate / (p + retrieval), rel=1e-12)
        seen.add(bool(hit))
    assert seen == {True, False}


@settings(max_examples=25)
@given(st.integers(0, 2 ** 32 - 1))
def test_cache_reward_conservation(seed):
    env = CacheEnv(desk_config(), *random_frozen(seed))
    env.reset(seed)
    res = env.step(np.random.default_rng(seed).random((env.num_agents, env.act_dim)))
    served = env.state.facility >= 0
    assert res.rewards.sum() == pytest.approx(env._last_metrics.ee[served].sum(), rel=1e-12)
    assert 0.0 <= res.info["hit_rate"] <= 1.0


def random_frozen(seed):
    cfg = desk_config()
    raw = np.random.default_rng(seed).normal(size=(cfg.num_users, cfg.num_facilities + 1))
    return repair_actions(raw, cfg)


def test_infeasible_frozen_association():
    with pytest.raises(ValueError):
        CacheEnv(tiny_cache_config(bs_capacity=1), [0, 0, 1], [0.5, 0.5, 0.5])


def test_trace_export(tmp_path):
    env = ResourceEnv(desk_config(), record_trace=True)
    env.reset(0)
    env.step(random_policy(env, np.random.default_rng(0)))
    env.write_trace(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,agent,action,reward,indicator"
    assert len(lines) == 13
    with pytest.raises(RuntimeError):
        ResourceEnv(desk_config()).write_trace(tmp_path / "x.csv")


def test_replay_reproduces_rewards():
    env = ResourceEnv(desk_config())
    env.reset(9)
    rng = np.random.default_rng(2)
    actions = [random_policy(env, rng) for _ in range(10)]
    first = [env.step(a).rewards for a in actions]
    env.reset(9)
    assert all(np.array_equal(env.step(a).rewards, r) for a, r in zip(actions, first))


def test_centralized_wrapper():
    inner = ResourceEnv(desk_config())
    env = CentralizedEnv(inner)
    assert env.num_agents == 1 and env.act_dim == 12 * 5 and env.obs_dim == 12
    assert env.reset(0).shape == (1, 12)
    res = env.step(random_policy(env, np.random.default_rng(0)))
    assert res.rewards.shape == (1,)
    assert res.rewards[0] == pytest.approx(res.info["system_ee"])
