"""Option machinery: feasible allocations, forced termination and the compound high-level policy."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .neural import ENUM_CAP, option_space_bits


@dataclass(frozen=True, eq=False)
class HighPolicyDistribution:
    support: np.ndarray   # (K, M) allocations
    probs: np.ndarray     # (K,)

    def __post_init__(self):
        if abs(float(np.sum(self.probs)) - 1.0) > 1e-9:
            raise ValueError("high-level policy probabilities must sum to 1")

    def prob(self, bits) -> float:
        bits = np.asarray(bits)
        hit = np.all(self.support == bits, axis=1)
        return float(self.probs[hit].sum())


def option_space(state, config, cap: int = ENUM_CAP) -> np.ndarray:
    """Every allocation of chargers to laying EBs using at most N chargers."""
    lay = int(np.sum(state.status))
    if lay > cap:
        raise ValueError(f"{lay} laying EBs exceeds the enumeration cap {cap}; "
                         "use the sequential allocation head")
    return option_space_bits(state.status, config.charger_count)


def forced_termination(prev_state, state) -> int:
    """1 if any EB arrived or departed between the two states."""
    return int(np.any(np.asarray(prev_state.status) + np.asarray(state.status) == 1))


def forced_termination_state(state) -> bool:
    return bool(np.any(state.status + state.prev_status == 1))


def compose_high_policy(mu, beta: float, prev_option):
    """Mix a fresh option draw with keeping the previous option.

    ``pi_H(w) = (1 - beta) * [w == prev] + beta * mu(w)``.

    Accepts either a :class:`HighPolicyDistribution` with an allocation
    ``prev_option``, or a probability vector with a one-hot
    ``prev_option`` over the same index set.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if isinstance(mu, HighPolicyDistribution):
        prev = np.asarray(prev_option)
        hit = np.all(mu.support == prev, axis=1)
        if beta < 1.0 and not hit.any():
            raise ValueError("previous option is infeasible; termination should have been forced")
        return HighPolicyDistribution(mu.support, (1 - beta) * hit + beta * mu.probs)
    mu = np.asarray(mu, dtype=float)
    keep = np.asarray(prev_option, dtype=float)
    if beta < 1.0 and keep.sum() == 0:
        raise ValueError("previous option is infeasible; termination should have been forced")
    return (1.0 - beta) * keep + beta * mu


@dataclass(frozen=True)
class BridgeEstimate:
    lhs: float
    rhs: float
    se: float
    lhs_cost: float
    rhs_cost: float
    se_cost: float

    @property
    def z(self) -> float:
        return abs(self.lhs - self.rhs) / self.se if self.se > 0 else \
            (0.0 if self.lhs == self.rhs else math.inf)

    @property
    def z_cost(self) -> float:
        return abs(self.lhs_cost - self.rhs_cost) / self.se_cost if self.se_cost > 0 else \
            (0.0 if self.lhs_cost == self.rhs_cost else math.inf)


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


def high_value_from_low(env, agent, state, num_rollouts: int, rng: np.random.Generator,
                        greedy: bool = False) -> BridgeEstimate:
    """Monte-Carlo check that the high-level values marginalize the low-level ones.

    Estimates ``V_H(s)`` by rolling out the full policy from ``s`` and
    ``V_L(s, w)`` by rolling out with the first option pinned to ``w``, then
    compares ``V_H(s)`` with ``sum_w pi_H(w|s) V_L(s, w)`` for rewards and
    for safety costs.
    """
    from .policy import run_episode

    if num_rollouts < 100:
        raise ValueError("num_rollouts must be >= 100")
    d0 = agent.act(state, np.random.default_rng(0), greedy=True)
    if greedy:
        options = d0.alloc[None, :]
        weights = np.ones(1)
    else:
        logits_probs = agent.alloc_head.probabilities(
            _high_logits(agent, state), state.status)
        options, mu = logits_probs
        prev = state.prev_alloc
        hit = np.all(options == prev, axis=1).astype(float)
        weights = mu if d0.forced else compose_high_policy(mu, d0.beta, hit)

    lhs_r, lhs_c = [], []
    for _ in range(num_rollouts):
        r, c, _ = run_episode(env, agent, rng, greedy=greedy, state=state)
        lhs_r.append(r)
        lhs_c.append(c)
    rhs = rhs_c = var = var_c = 0.0
    for w, opt in zip(weights, options):
        if w == 0.0:
            continue
        rr, cc = [], []
        for _ in range(num_rollouts):
            r, c, _ = run_episode(env, agent, rng, greedy=greedy, state=state, first_option=opt)
            rr.append(r)
            cc.append(c)
        m_r, s_r = _mean_se(rr)
        m_c, s_c = _mean_se(cc)
        rhs += w * m_r
        rhs_c += w * m_c
        var += (w * s_r) ** 2
        var_c += (w * s_c) ** 2
    m_l, s_l = _mean_se(lhs_r)
    m_lc, s_lc = _mean_se(lhs_c)
    return BridgeEstimate(m_l, rhs, math.sqrt(s_l ** 2 + var),
                          m_lc, rhs_c, math.sqrt(s_lc ** 2 + var_c))


def _high_logits(agent, state):
    from .env import encode_global
    return agent.snapshots()[0](encode_global(state, agent.config))
