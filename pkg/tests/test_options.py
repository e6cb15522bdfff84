import dataclasses
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ebcsl.env import FleetEnv
from ebcsl.options import (HighPolicyDistribution, compose_high_policy, forced_termination,
                           forced_termination_state, high_value_from_low, option_space)
from ebcsl.policy import Agent, NetworkSizes

from conftest import full_day_scenario, small_scenario

TINY = NetworkSizes((16,), (8,), (16,), (16,))


class _S:
    def __init__(self, status, prev_status=None):
        self.status = np.asarray(status)
        self.prev_status = np.asarray(status if prev_status is None else prev_status)


def _sorted(rows):
    return sorted(map(tuple, np.asarray(rows).tolist()))


def test_option_space_two_laying_one_charger():
    opts = option_space(_S([1, 1]), small_scenario())
    assert _sorted(opts) == [(0, 0), (0, 1), (1, 0)]


def test_option_space_nobody_laying():
    opts = option_space(_S([0, 0, 0, 0]), full_day_scenario())
    assert opts.tolist() == [[0, 0, 0, 0]]


def test_option_space_binomial_count():
    opts = option_space(_S([1] * 6), full_day_scenario(M=6, N=3))
    assert len(opts) == 1 + 6 + 15 + 20
    assert len({tuple(o) for o in opts.tolist()}) == 42


def test_option_space_zeros_outside_layover():
    opts = option_space(_S([1, 0, 1, 0]), full_day_scenario())
    assert np.all(opts[:, [1, 3]] == 0) and np.all(opts.sum(axis=1) <= 2)


def test_option_space_cap():
    with pytest.raises(ValueError, match="sequential"):
        option_space(_S([1] * 13), full_day_scenario(M=13, N=2))


@pytest.mark.parametrize("prev,cur,expect", [([1, 1, 0], [1, 1, 0], 0), ([1, 1, 0], [0, 1, 0], 1),
                                             ([1, 0, 0], [0, 1, 0], 1), ([0, 0, 0], [0, 0, 0], 0)])
def test_forced_termination(prev, cur, expect):
    assert forced_termination(_S(prev), _S(cur)) == expect
    assert forced_termination_state(_S(cur, prev)) == bool(expect)


def test_compose_beta_zero_keeps_option():
    mu = HighPolicyDistribution(np.array([[0, 0], [1, 0], [0, 1]]), np.array([0.2, 0.5, 0.3]))
    pi = compose_high_policy(mu, 0.0, [1, 0])
    np.testing.assert_allclose(pi.probs, [0, 1, 0])


def test_compose_beta_one_is_mu():
    mu = HighPolicyDistribution(np.array([[0, 0], [1, 0], [0, 1]]), np.array([0.2, 0.5, 0.3]))
    np.testing.assert_allclose(compose_high_policy(mu, 1.0, [1, 0]).probs, mu.probs)


def test_compose_half():
    mu = HighPolicyDistribution(np.array([[0, 0], [1, 0], [0, 1]]), np.array([0.2, 0.5, 0.3]))
    pi = compose_high_policy(mu, 0.5, [0, 0])
    assert pi.prob([0, 0]) == pytest.approx(0.6)
    assert pi.prob([1, 0]) == pytest.approx(0.25)


def test_compose_rejects_infeasible_previous():
    mu = HighPolicyDistribution(np.array([[0, 0], [1, 0]]), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        compose_high_policy(mu, 0.5, [0, 1])
    with pytest.raises(ValueError):
        compose_high_policy(np.array([0.5, 0.5]), 0.3, np.zeros(2))
    with pytest.raises(ValueError):
        compose_high_policy(mu, 1.5, [0, 0])


def test_distribution_must_normalize():
    with pytest.raises(ValueError):
        HighPolicyDistribution(np.array([[0], [1]]), np.array([0.5, 0.6]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.001, 10), min_size=2, max_size=8), st.floats(0, 1),
       st.integers(0, 7))
def test_composed_policy_is_distribution(w, beta, k):
    mu = np.array(w) / np.sum(w)
    keep = np.zeros(mu.size)
    keep[k % mu.size] = 1.0
    pi = compose_high_policy(mu, beta, keep)
    assert abs(pi.sum() - 1.0) <= 1e-9 and np.all(pi >= 0)


def test_option_persists_when_not_terminating():
    sc = small_scenario()
    env = FleetEnv(sc)
    agent = Agent(sc, TINY, seed=0)
    with torch.no_grad():
        agent.term.layers[-1].bias.fill_(-50.0)   # beta ~ 0
    rng = np.random.default_rng(0)
    s = env.reset(rng)
    kept = 0
    while s.t < env.T:
        d = agent.act(s, rng)
        if not d.forced:
            assert np.array_equal(d.alloc, s.prev_alloc)
            kept += 1
        s = env.step(s, d.alloc, d.powers, rng).next_state
    assert kept > 0


def test_forced_termination_resamples():
    sc = small_scenario()
    env = FleetEnv(sc)
    agent = Agent(sc, TINY, seed=0)
    rng = np.random.default_rng(1)
    s = env.reset(rng)
    while s.t < env.T:
        d = agent.act(s, rng)
        if forced_termination_state(s) or s.t == 0:
            assert d.forced and d.beta == 1.0
        s = env.step(s, d.alloc, d.powers, rng).next_state


def test_decision_probabilities_match_composition():
    sc = small_scenario()
    env = FleetEnv(sc)
    agent = Agent(sc, TINY, seed=2)
    rng = np.random.default_rng(2)
    s = env.reset(rng)
    while s.t < env.T:
        d = agent.act(s, rng)
        assert abs(d.option_probs.sum() - 1.0) <= 1e-9
        assert math.exp(d.logp_high) == pytest.approx(d.option_probs[d.option_index])
        s = env.step(s, d.alloc, d.powers, rng).next_state


def test_bridge_exact_when_deterministic():
    sc = small_scenario(travel=dataclasses.replace(small_scenario().travel, peak_sd=0.0,
                                                   offpeak_sd=0.0),
                        consumption_band=(30.0, 30.0))
    env = FleetEnv(sc)
    agent = Agent(sc, TINY, seed=3)
    s = env.reset(np.random.default_rng(0))
    est = high_value_from_low(env, agent, s, 100, np.random.default_rng(0), greedy=True)
    assert est.lhs == est.rhs and est.lhs_cost == est.rhs_cost and est.se == 0.0


def test_bridge_within_standard_errors():
    sc = small_scenario()
    env = FleetEnv(sc)
    agent = Agent(sc, TINY, seed=4)
    rng = np.random.default_rng(5)
    s = env.reset(rng)
    for _ in range(3):
        d = agent.act(s, rng)
        s = env.step(s, d.alloc, d.powers, rng).next_state
    est = high_value_from_low(env, agent, s, 300, rng)
    assert est.z <= 3.0 and est.z_cost <= 3.0


def test_bridge_rejects_few_rollouts():
    sc = small_scenario()
    env = FleetEnv(sc)
    with pytest.raises(ValueError):
        high_value_from_low(env, Agent(sc, TINY), env.reset(np.random.default_rng(0)), 99,
                            np.random.default_rng(0))
