import math

import numpy as np
import pytest
import torch

from ebcsl.env import FleetEnv
from ebcsl.policy import Agent, NetworkSizes
from ebcsl.trainer import (LagrangeState, NonFiniteLoss, TrainConfig, Trainer,
                           adjusted_advantages, clipped_surrogate, collect_rollouts,
                           compute_advantages, compute_returns, critic_objectives,
                           gae_advantages, high_ppo_objective, low_mappo_objective, suffix_sums,
                           update_lambdas)

from conftest import full_day_scenario, small_scenario

TINY = NetworkSizes((16,), (8,), (16,), (16,))


def _cfg(**kw):
    base = dict(iterations=2, episodes_per_iter=2, batch_size=16, epochs=1, sizes=TINY)
    base.update(kw)
    return TrainConfig(**base)


# -- buffer -----------------------------------------------------------------
def test_buffer_rows_per_episode():
    sc = full_day_scenario(M=6, N=2)
    agent = Agent(sc, TINY)
    buf = collect_rollouts(FleetEnv(sc), agent, 1, np.random.default_rng(0))
    assert len(buf) == 144 and buf.episodes == 1


def test_buffer_reproducible():
    sc = small_scenario()
    agent = Agent(sc, TINY)
    a = collect_rollouts(FleetEnv(sc), agent, 3, np.random.default_rng(7))
    b = collect_rollouts(FleetEnv(sc), agent, 3, np.random.default_rng(7))
    for f in ("rewards", "costs", "alloc", "logp_high", "z", "logp_low"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_controlled_mask_matches_allocation():
    sc = small_scenario()
    buf = collect_rollouts(FleetEnv(sc), Agent(sc, TINY), 4, np.random.default_rng(1))
    mask = buf.controlled_mask()
    # allocated EBs with a degenerate power interval are set directly, never by the actor
    assert np.all(mask <= buf.alloc)
    np.testing.assert_array_equal(buf.pair_agent, np.flatnonzero(mask) % sc.fleet_size)


# -- returns and advantages --------------------------------------------------
def test_suffix_sums():
    np.testing.assert_array_equal(suffix_sums([1, 2, 3]), [6, 5, 3])


def test_returns_per_episode():
    sc = small_scenario()
    buf = collect_rollouts(FleetEnv(sc), Agent(sc, TINY), 3, np.random.default_rng(2))
    R, C = compute_returns(buf)
    for sl in buf.episode_slices():
        assert R[sl][0] == pytest.approx(buf.rewards[sl].sum())
        assert C[sl][-1] == buf.costs[sl][-1]


def test_gae_worked_example():
    np.testing.assert_allclose(gae_advantages([1, 0], [0, 0, 0], 1.0, 0.95), [1, 0])


def test_gae_perfect_critic_zero():
    r = np.array([0.5, -1.0, 2.0, 0.3])
    v = np.append(suffix_sums(r), 0.0)
    np.testing.assert_allclose(gae_advantages(r, v, 1.0, 1.0), 0.0, atol=1e-12)


def test_gae_telescopes_to_return_minus_value():
    rng = np.random.default_rng(0)
    for _ in range(20):
        r = rng.standard_normal(5)
        v = np.append(rng.standard_normal(5), 0.0)
        brute = np.array([sum(r[t:]) - v[t] for t in range(5)])
        np.testing.assert_allclose(gae_advantages(r, v, 1.0, 1.0), brute, atol=1e-12)


def test_gae_rejects_wrong_value_length():
    with pytest.raises(ValueError):
        gae_advantages([1, 2], [0, 0], 1.0, 0.95)


def test_adjusted_advantages():
    assert adjusted_advantages([1.0], [2.0], 2.5)[0] == -4.0
    np.testing.assert_array_equal(adjusted_advantages([1.0, -2.0], [3.0, 4.0], 0.0), [1.0, -2.0])
    np.testing.assert_array_equal(adjusted_advantages([1.0, -2.0], [0.0, 0.0], 7.0), [1.0, -2.0])


# -- surrogate objectives ---------------------------------------------------
def test_clipped_branch_positive_advantage():
    obj, _ = clipped_surrogate(torch.tensor([math.log(1.5)], dtype=torch.float64), [0.0],
                               [2.0], 0.2)
    assert obj.item() == pytest.approx(1.2 * 2.0)


def test_negative_advantage_not_rescued():
    lp_new = torch.tensor([0.0, math.log(2.0)], dtype=torch.float64)
    obj, _ = clipped_surrogate(lp_new, [0.0, 0.0], [-1.0, -1.0], 0.2)
    assert obj.item() == pytest.approx(-1.5)


def test_non_finite_ratio_excluded():
    lp_new = torch.tensor([0.0, math.inf], dtype=torch.float64)
    obj, excluded = clipped_surrogate(lp_new, [0.0, 0.0], [1.0, 5.0], 0.2)
    assert excluded == 1 and obj.item() == 1.0


def test_on_policy_ratio_is_one():
    sc = small_scenario()
    agent = Agent(sc, TINY, seed=3)
    buf = collect_rollouts(FleetEnv(sc), agent, 3, np.random.default_rng(3))
    idx = np.arange(len(buf))
    with torch.no_grad():
        lp_h = agent.high_log_prob(buf.gobs, buf.status, buf.prev_alloc, buf.alloc,
                                   buf.option_index, buf.forced).numpy()
        lp_l = agent.low_log_prob(buf.lobs, buf.z, buf.lo, buf.hi).numpy()
    np.testing.assert_allclose(np.exp(lp_h - buf.logp_high), 1.0, atol=1e-6)
    np.testing.assert_allclose(np.exp(lp_l - buf.logp_low), 1.0, atol=1e-6)
    adv = np.random.default_rng(0).standard_normal(len(buf))
    obj, _ = high_ppo_objective(agent, buf, idx, adv, 0.2)
    assert obj.item() == pytest.approx(adv.mean(), abs=1e-6)
    pidx = np.arange(buf.pair_step.size)
    obj, _ = low_mappo_objective(agent, buf, pidx, adv, 0.2)
    assert obj.item() == pytest.approx(adv[buf.pair_step].mean(), abs=1e-6)
    obj, _ = low_mappo_objective(agent, buf, np.array([], int), adv, 0.2)
    assert obj.item() == 0.0


def test_forced_steps_use_mu_only():
    sc = small_scenario()
    agent = Agent(sc, TINY, seed=4)
    buf = collect_rollouts(FleetEnv(sc), agent, 2, np.random.default_rng(4))
    f = np.flatnonzero(buf.forced)
    assert f.size and np.all(buf.beta[f] == 1.0)


def test_critic_mse():
    sc = small_scenario()
    agent = Agent(sc, TINY)
    buf = collect_rollouts(FleetEnv(sc), agent, 1, np.random.default_rng(0))
    idx = np.array([0, 1])
    with torch.no_grad():
        vr, vc = agent.values(buf.gobs[idx], buf.alloc[idx])
    R = np.zeros(len(buf))
    R[idx] = vr.numpy() + np.array([2.0, 4.0])
    C = np.zeros(len(buf))
    C[idx] = vc.numpy()
    mse_r, mse_c = critic_objectives(agent, buf, idx, R, C)
    assert mse_r.item() == pytest.approx(10.0) and mse_c.item() == pytest.approx(0.0, abs=1e-20)


# -- dual update ------------------------------------------------------------
def test_dual_update_arithmetic():
    lag = update_lambdas(LagrangeState(0.5, 0.5), 0.125, 0.125)
    assert lag.lambda_H == pytest.approx(0.501) and lag.lambda_L == pytest.approx(0.501)


def test_dual_projection_floor():
    lag = update_lambdas(LagrangeState(0.0, 0.0), 0.0, 0.0)
    assert lag.lambda_H == 0.0 and lag.lambda_L == 0.0


def test_dual_equilibrium():
    lag = update_lambdas(LagrangeState(0.3, 0.7), 0.025, 0.025)
    assert lag.lambda_H == 0.3 and lag.lambda_L == 0.7


def test_dual_monotone():
    rng = np.random.default_rng(0)
    lag = LagrangeState(1.0, 1.0)
    for _ in range(50):
        j = rng.uniform(0.03, 5)
        new = update_lambdas(lag, j, j)
        assert new.lambda_H >= lag.lambda_H
        lag = new
    for _ in range(50):
        j = rng.uniform(0, 0.02)
        new = update_lambdas(lag, j, j)
        assert new.lambda_H < lag.lambda_H or new.lambda_H == 0.0
        lag = new


def test_lagrange_rejects_negative():
    with pytest.raises(ValueError):
        LagrangeState(-0.1, 0.0)


# -- trainer ----------------------------------------------------------------
def test_metrics_reproducible(tmp_path):
    sc = small_scenario()
    a = Trainer(sc, _cfg(seed=5, record_wall_time=False)).train(metrics_path=tmp_path / "a.csv")
    b = Trainer(sc, _cfg(seed=5, record_wall_time=False)).train(metrics_path=tmp_path / "b.csv")
    assert a == b
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_fixed_mode_keeps_lambda():
    tr = Trainer(small_scenario(), _cfg(mode="fixed", fixed_lambda=2.5))
    hist = tr.train()
    assert all(h["lambda_H"] == 2.5 and h["lambda_L"] == 2.5 for h in hist)


def test_zero_dual_rate_is_unconstrained():
    tr = Trainer(small_scenario(), _cfg(lambda_lr=0.0))
    assert all(h["lambda_H"] == 0.0 for h in tr.train())


def test_lagrangian_mode_follows_update_rule():
    tr = Trainer(small_scenario(), _cfg(iterations=1))
    h = tr.train()[0]
    expect = max(0.0, 0.01 * (h["mean_safety"] - 0.025))
    assert h["lambda_H"] == pytest.approx(expect)


def test_checkpoints_written(tmp_path):
    tr = Trainer(small_scenario(), _cfg(iterations=2))
    tr.train(ckpt_dir=tmp_path, ckpt_every=1)
    assert (tmp_path / "checkpoint_1.bin").exists() and (tmp_path / "checkpoint_2.bin").exists()


def test_non_finite_loss_dumps_parameters(tmp_path):
    tr = Trainer(small_scenario(), _cfg(iterations=1))
    tr.dump_dir = tmp_path
    with pytest.raises(NonFiniteLoss):
        tr._check(torch.tensor(math.nan), "test")
    assert (tmp_path / "nonfinite_iter0.bin").exists()


@pytest.mark.parametrize("kw", [dict(clip=0.0), dict(gamma=1.5), dict(mode="other"),
                                dict(batch_size=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_sequential_head_trains():
    tr = Trainer(small_scenario(), _cfg(alloc_mode="sequential"))
    hist = tr.train()
    assert all(np.isfinite(h["loss_H"]) for h in hist)
