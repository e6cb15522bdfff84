import itertools
import math

import numpy as np
import pytest
import torch
from scipy import integrate

from ebcsl.neural import (AllocationHead, Mlp, MlpSnapshot, Optimizer, OptionTable,
                          SquashedGaussianHead, allocation_sample_logprob, forward,
                          gaussian_sample_logprob, gradients, load_checkpoint, optimizer_step,
                          save_checkpoint)


def _finite_diff(f, params, eps=1e-5, n=25, seed=0):
    """Central differences on ``n`` random coordinates; returns (numeric, indices)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(len(params)))
        p = params[k]
        j = int(rng.integers(p.numel()))
        with torch.no_grad():
            flat = p.view(-1)
            old = flat[j].item()
            flat[j] = old + eps
            up = f().item()
            flat[j] = old - eps
            dn = f().item()
            flat[j] = old
        out.append((k, j, (up - dn) / (2 * eps)))
    return out


def _check_grads(f, params, tol=1e-4):
    params = list(params)
    grads = gradients(f(), params)
    worst = 0.0
    for k, j, num in _finite_diff(f, params):
        ana = grads[k].reshape(-1)[j].item()
        worst = max(worst, abs(ana - num) / max(1e-6, abs(ana), abs(num)))
    assert worst <= tol


# -- forward ----------------------------------------------------------------
def test_zero_net_gives_zero():
    net = Mlp((3, 4, 2))
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    np.testing.assert_array_equal(forward(net, np.ones(3)), np.zeros(2))


def test_single_linear_layer_matches_hand_product():
    net = Mlp((2, 2))
    W = np.array([[1.0, 2.0], [3.0, 4.0]])   # stored as (out, in)
    with torch.no_grad():
        net.layers[0].weight.copy_(torch.tensor(W))
        net.layers[0].bias.copy_(torch.tensor([0.5, -1.0]))
    x = np.array([1.0, -2.0])
    np.testing.assert_allclose(forward(net, x), [1 - 4 + 0.5, 3 - 8 - 1.0])


def test_forward_deterministic_and_snapshot_agrees():
    net = Mlp((5, 16, 3), seed=1)
    x = np.random.default_rng(0).standard_normal((7, 5))
    a, b = forward(net, x), forward(net, x)
    assert np.array_equal(a, b)
    np.testing.assert_allclose(MlpSnapshot(net)(x), a, rtol=1e-12, atol=1e-12)


def test_dim_mismatch():
    net = Mlp((3, 2))
    with pytest.raises(ValueError):
        forward(net, np.ones(4))
    with pytest.raises(ValueError):
        MlpSnapshot(net)(np.ones(4))


def test_seeded_init_reproducible():
    a, b = Mlp((4, 8, 2), seed=3), Mlp((4, 8, 2), seed=3)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


# -- gradients --------------------------------------------------------------
def test_sum_of_squares_gradient():
    net = Mlp((3, 4, 2), seed=0)
    params = list(net.parameters())
    g = gradients(sum((p ** 2).sum() for p in params), params)
    for p, gp in zip(params, g):
        assert torch.allclose(gp, 2 * p)


def test_mlp_gradient_vs_finite_differences():
    net = Mlp((10, 64, 64, 1), seed=2)
    x = torch.as_tensor(np.random.default_rng(1).standard_normal((8, 10)))
    y = torch.as_tensor(np.random.default_rng(2).standard_normal(8))
    _check_grads(lambda: ((net(x).squeeze(-1) - y) ** 2).mean(), net.parameters())


def test_clip_subgradient():
    for x0, expect in ((1.0, 1.0), (1.5, 0.0), (0.5, 0.0)):
        x = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
        (g,) = gradients(torch.clamp(x, 0.8, 1.2), [x])
        assert g.item() == expect


def test_gradients_require_scalar():
    x = torch.ones(2, dtype=torch.float64, requires_grad=True)
    with pytest.raises(ValueError):
        gradients(x * 2, [x])


def test_power_head_gradient():
    head = SquashedGaussianHead(init_log_std=-0.3)
    net = Mlp((4, 8, 1), seed=5)
    x = torch.as_tensor(np.random.default_rng(3).standard_normal((6, 4)))
    z = torch.as_tensor(np.random.default_rng(4).standard_normal(6))
    lo, hi = torch.full((6,), -20.0, dtype=torch.float64), torch.full((6,), 90.0, dtype=torch.float64)
    params = list(net.parameters()) + [head.log_std]
    _check_grads(lambda: head.log_prob(net(x).squeeze(-1), z, lo, hi).sum(), params)


def test_allocation_head_gradients():
    status = np.array([1, 1, 0, 1])
    for mode in ("enumeration", "sequential"):
        head = AllocationHead(4, 2, mode)
        net = Mlp((3, 8, head.out_dim), seed=6)
        x = torch.as_tensor(np.array([0.3, -0.2, 0.9]))
        _check_grads(lambda: head.log_prob(net(x), [1, 0, 0, 1], status), net.parameters())


# -- power head -------------------------------------------------------------
def test_squash_midpoint():
    head = SquashedGaussianHead(init_log_std=math.log(1e-12))
    a, _ = gaussian_sample_logprob(head, 0.0, (0.0, 120.0), np.random.default_rng(0), greedy=True)
    assert a[0] == pytest.approx(60.0)
    assert SquashedGaussianHead.squash(0.0, 0.0, 120.0) == 60.0


@pytest.mark.parametrize("mean,lo,hi,log_std", [(0.0, 0.0, 120.0, math.log(0.5)),
                                                (1.3, -120.0, 40.0, 0.2),
                                                (-0.7, -60.0, 0.0, -1.0)])
def test_log_prob_integrates_to_one(mean, lo, hi, log_std):
    head = SquashedGaussianHead(init_log_std=log_std)

    def density(a):
        u = np.clip(2 * (a - lo) / (hi - lo) - 1, -1 + 1e-15, 1 - 1e-15)
        z = torch.tensor([np.arctanh(u)], dtype=torch.float64)
        with torch.no_grad():
            return math.exp(head.log_prob(torch.tensor([mean], dtype=torch.float64), z,
                                          torch.tensor(lo, dtype=torch.float64),
                                          torch.tensor(hi, dtype=torch.float64)).item())

    total, _ = integrate.quad(density, lo, hi, limit=200)
    assert abs(total - 1.0) <= 1e-3


def test_numpy_and_torch_log_prob_agree():
    head = SquashedGaussianHead(init_log_std=-0.4)
    rng = np.random.default_rng(0)
    mean = rng.standard_normal(20)
    a, z, lp = head.sample(mean, -50.0, 80.0, rng)
    with torch.no_grad():
        ref = head.log_prob(torch.as_tensor(mean), torch.as_tensor(z),
                            torch.tensor(-50.0, dtype=torch.float64),
                            torch.tensor(80.0, dtype=torch.float64)).numpy()
    np.testing.assert_allclose(lp, ref, rtol=1e-12)
    assert np.all((a > -50) & (a < 80)) and np.all(np.isfinite(lp))


def test_power_head_rejects_empty_interval():
    with pytest.raises(ValueError):
        SquashedGaussianHead().sample(np.zeros(1), 0.0, 0.0, np.random.default_rng(0))


def test_power_head_fuzz_stays_in_bounds():
    head = SquashedGaussianHead(init_log_std=1.5)
    rng = np.random.default_rng(9)
    for _ in range(200):
        lo = rng.uniform(-120, 100)
        hi = lo + rng.uniform(1e-3, 120)
        a, _, lp = head.sample(rng.normal(0, 5, 4), lo, hi, rng)
        assert np.all((a >= lo) & (a <= hi)) and np.all(np.isfinite(lp))


# -- allocation head --------------------------------------------------------
def test_option_table_order():
    t = OptionTable(2, 1)
    assert t.options.tolist() == [[0, 0], [1, 0], [0, 1]]
    assert len(OptionTable(4, 2)) == 1 + 4 + 6


def test_uniform_enumeration():
    head = AllocationHead(2, 1, "enumeration")
    opts, probs = head.probabilities(np.zeros(3), [1, 1])
    np.testing.assert_allclose(probs, [1 / 3] * 3)


def test_two_option_softmax():
    head = AllocationHead(1, 1, "enumeration")
    opts, probs = head.probabilities(np.array([0.0, math.log(2)]), [1])
    np.testing.assert_allclose(probs, [1 / 3, 2 / 3])


def test_masked_options_never_sampled():
    head = AllocationHead(3, 1, "enumeration")
    rng = np.random.default_rng(0)
    for _ in range(300):
        bits, lp = allocation_sample_logprob(head, rng.standard_normal(4), [1, 0, 1], rng)
        assert bits[1] == 0 and np.isfinite(lp)


def test_sequential_single_pick():
    head = AllocationHead(2, 1, "sequential")
    with torch.no_grad():
        lp = head.log_prob(torch.zeros(3, dtype=torch.float64), [1, 0], [1, 1])
    assert lp.item() == pytest.approx(math.log(1 / 3))


def _pick_sequence_probs(scores, status, N):
    """Brute force over pick orders: P(set) for every reachable allocation."""
    M = len(status)
    lay = [m for m in range(M) if status[m] == 1]
    out = {}

    def rec(picked, prob):
        if len(picked) == N:
            key = tuple(int(m in picked) for m in range(M))
            out[key] = out.get(key, 0.0) + prob
            return
        cand = [m for m in lay if m not in picked] + [M]
        w = np.exp([scores[c] for c in cand])
        w = w / w.sum()
        for c, p in zip(cand, w):
            if c == M:
                key = tuple(int(m in picked) for m in range(M))
                out[key] = out.get(key, 0.0) + prob * p
            else:
                rec(picked + [c], prob * p)

    rec([], 1.0)
    return out


@pytest.mark.parametrize("status,N", [([1, 1, 1], 2), ([1, 0, 1], 2), ([1, 1, 1], 1),
                                      ([1, 1, 1], 3), ([0, 0, 1], 1)])
def test_sequential_likelihood_matches_enumeration(status, N):
    head = AllocationHead(3, N, "sequential")
    scores = np.random.default_rng(sum(status) + N).standard_normal(4)
    ref = _pick_sequence_probs(scores, status, N)
    opts, probs = head.probabilities(scores, status)
    got = {tuple(o): p for o, p in zip(opts.tolist(), probs)}
    assert set(got) == set(ref)
    for k in ref:
        assert got[k] == pytest.approx(ref[k], rel=1e-12)
    assert sum(probs) == pytest.approx(1.0, abs=1e-12)


def test_sampled_log_prob_matches_probability():
    rng = np.random.default_rng(4)
    for mode in ("enumeration", "sequential"):
        head = AllocationHead(3, 2, mode)
        logits = rng.standard_normal(head.out_dim)
        opts, probs = head.probabilities(logits, [1, 1, 0])
        table = {tuple(o): p for o, p in zip(opts.tolist(), probs)}
        for _ in range(30):
            bits, lp = head.sample(logits, [1, 1, 0], rng)
            assert math.exp(lp) == pytest.approx(table[tuple(bits.tolist())], rel=1e-12)


def test_sequential_never_infeasible():
    head = AllocationHead(5, 2, "sequential")
    rng = np.random.default_rng(1)
    for _ in range(300):
        status = rng.integers(0, 2, 5)
        bits, _ = head.sample(rng.standard_normal(6), status, rng)
        assert bits.sum() <= 2 and np.all(bits <= status)


# -- optimizer --------------------------------------------------------------
def test_zero_gradient_leaves_params():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    opt = Optimizer([p], lr=0.1)
    for _ in range(3):
        assert optimizer_step(opt, [p], [torch.zeros(2, dtype=torch.float64)])
    assert torch.equal(p.detach(), torch.tensor([1.0, -2.0], dtype=torch.float64))


def test_zero_lr_leaves_params():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    opt = Optimizer([p], lr=0.0)
    optimizer_step(opt, [p], [torch.ones(2, dtype=torch.float64)])
    assert torch.equal(p.detach(), torch.tensor([1.0, -2.0], dtype=torch.float64))


def test_constant_gradient_step_size():
    p = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
    opt = Optimizer([p], lr=1e-3)
    prev = 0.0
    for _ in range(200):
        optimizer_step(opt, [p], [torch.full((1,), 3.0, dtype=torch.float64)])
        step = prev - p.item()
        prev = p.item()
    assert step == pytest.approx(1e-3, rel=1e-6)


def test_non_finite_gradient_rejected():
    p = torch.nn.Parameter(torch.ones(2, dtype=torch.float64))
    opt = Optimizer([p], lr=0.1)
    assert not optimizer_step(opt, [p], [torch.tensor([math.nan, 1.0], dtype=torch.float64)])
    assert opt.rejected == 1 and torch.equal(p.detach(), torch.ones(2, dtype=torch.float64))
    assert not opt.step((p * math.inf).sum())
    assert opt.rejected == 2


# -- checkpoints ------------------------------------------------------------
def test_checkpoint_round_trip_bitwise(tmp_path):
    a = {"actor": Mlp((4, 8, 3), seed=1), "critic": Mlp((4, 8, 1), seed=2)}
    b = {"actor": Mlp((4, 8, 3), seed=7), "critic": Mlp((4, 8, 1), seed=8)}
    save_checkpoint(tmp_path / "c.bin", a, {"iteration": 12, "lambda_H": 0.25})
    meta = load_checkpoint(tmp_path / "c.bin", b)
    assert meta == {"iteration": 12.0, "lambda_H": 0.25}
    for k in a:
        for p, q in zip(a[k].parameters(), b[k].parameters()):
            assert p.detach().numpy().tobytes() == q.detach().numpy().tobytes()
    save_checkpoint(tmp_path / "d.bin", b, meta)
    assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "d.bin").read_bytes()


def test_checkpoint_rejects_bad_files(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"garbage!")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.bin", {"actor": Mlp((4, 8, 3))})
    save_checkpoint(tmp_path / "c.bin", {"actor": Mlp((4, 8, 3))})
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "c.bin", {"actor": Mlp((4, 9, 3))})
