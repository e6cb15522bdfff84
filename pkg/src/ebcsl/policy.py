"""The hierarchical agent: policy over options, termination, shared low-level actor, critics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .data import ScenarioConfig
from .env import (FleetEnv, GlobalState, encode_global, encode_locals, feasible_power_range,
                  global_dim, local_dim)
from .neural import AllocationHead, Mlp, MlpSnapshot, SquashedGaussianHead, load_checkpoint, \
    save_checkpoint
from .options import compose_high_policy, forced_termination_state


@dataclass(frozen=True)
class NetworkSizes:
    high_actor: tuple = (128, 128)
    termination: tuple = (64, 64)
    low_actor: tuple = (64, 64)
    critic: tuple = (128, 128)


class Decision(NamedTuple):
    alloc: np.ndarray
    option_index: int
    beta: float
    forced: bool
    logp_high: float
    option_probs: np.ndarray      # pi_H over the head's option table (enumeration mode)
    powers: np.ndarray
    agents: np.ndarray            # EBs whose power came from the low-level actor
    local_obs: np.ndarray
    z: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    logp_low: np.ndarray
    global_obs: np.ndarray


class Agent:
    """Network bundle plus the sampling logic used by rollouts and evaluation."""

    def __init__(self, config: ScenarioConfig, sizes: NetworkSizes = NetworkSizes(),
                 seed: int = 0, alloc_mode: str | None = None,
                 init_log_std: float = math.log(0.5), value_scale=(1.0, 1.0)):
        self.config = config
        M, N = config.fleet_size, config.charger_count
        h = config.timebase.history_window
        self.M, self.N = M, N
        self.gdim, self.ldim = global_dim(M, h), local_dim(M, h)
        self.alloc_head = AllocationHead(M, N, alloc_mode)
        self.high = Mlp([self.gdim, *sizes.high_actor, self.alloc_head.out_dim], 0.01, seed)
        self.term = Mlp([self.gdim, *sizes.termination, 1], 0.01, seed + 1)
        self.low = Mlp([self.ldim, *sizes.low_actor, 1], 0.01, seed + 2)
        self.power_head = SquashedGaussianHead(1, init_log_std)
        self.critic_r = Mlp([self.gdim + M, *sizes.critic, 1], 1.0, seed + 3)
        self.critic_c = Mlp([self.gdim + M, *sizes.critic, 1], 1.0, seed + 4)
        with torch.no_grad():
            # safety values are nonnegative; start the softplus output near zero
            self.critic_c.layers[-1].bias.fill_(-4.0)
        self.value_scale = tuple(float(v) for v in value_scale)
        self._snap_key = None
        self._snaps = None
        self._acting_params = [p for net in (self.high, self.term, self.low)
                               for p in net.parameters()]

    def snapshots(self):
        """Numpy copies of the acting networks, rebuilt whenever a weight changes."""
        key = tuple(p._version for p in self._acting_params)
        if key != self._snap_key:
            self._snaps = (MlpSnapshot(self.high), MlpSnapshot(self.term), MlpSnapshot(self.low))
            self._snap_key = key
        return self._snaps

    # ------------------------------------------------------------------ io
    def modules(self):
        return {"high_actor": self.high, "termination": self.term, "low_actor": self.low,
                "power_head": self.power_head, "critic_r": self.critic_r,
                "critic_c": self.critic_c}

    def save(self, path, meta=None):
        save_checkpoint(path, self.modules(), meta)

    def load(self, path):
        return load_checkpoint(path, self.modules())

    # ------------------------------------------------------------------ values
    def values(self, gobs, alloc):
        """Reward and cost critic outputs for ``(S_t, omega_t)`` batches (torch)."""
        x = torch.cat([torch.as_tensor(gobs), torch.as_tensor(alloc, dtype=torch.float64)], -1)
        vr = self.critic_r(x).squeeze(-1) * self.value_scale[0]
        vc = F.softplus(self.critic_c(x).squeeze(-1)) * self.value_scale[1]
        return vr, vc

    def termination_logit(self, gobs):
        return self.term(torch.as_tensor(gobs)).squeeze(-1)

    def beta(self, state: GlobalState, gobs=None) -> tuple[float, bool]:
        """Termination probability of the carried-over option in ``state``."""
        if state.t == 0 or forced_termination_state(state):
            return 1.0, True
        if gobs is None:
            gobs = encode_global(state, self.config)
        x = float(self.snapshots()[1](gobs)[0])
        return 1.0 / (1.0 + math.exp(-x)), False

    # ------------------------------------------------------------------ acting
    def act(self, state: GlobalState, rng: np.random.Generator, greedy: bool = False,
            force_option=None) -> Decision:
        cfg = self.config
        g = encode_global(state, cfg)
        beta, forced = self.beta(state, g)
        logits = self.snapshots()[0](g)
        prev = state.prev_alloc
        head = self.alloc_head

        if force_option is not None:
            alloc = np.asarray(force_option, dtype=int)
        elif greedy:
            if beta > 0.5:
                alloc, _ = head.sample(logits, state.status, rng, greedy=True)
            else:
                alloc = prev.copy()
        else:
            if beta >= 1.0 or rng.random() < beta:
                alloc, _ = head.sample(logits, state.status, rng)
            else:
                alloc = prev.copy()

        option_probs = np.zeros(0)
        if head.mode == "enumeration":
            mask = head.table.feasible_mask(state.status)
            mu = np.zeros(len(head.table))
            _, p = head.probabilities(logits, state.status)
            mu[mask] = p
            prev_onehot = np.zeros_like(mu)
            prev_onehot[head.table.index(prev)] = 1.0 if mask[head.table.index(prev)] else 0.0
            option_probs = compose_high_policy(mu, beta, prev_onehot) if not forced else mu
            option_index = head.table.index(alloc)
            logp_high = math.log(option_probs[option_index])
        else:
            option_index = -1
            with torch.no_grad():
                lmu = float(head.log_prob(torch.as_tensor(logits), alloc, state.status))
            if forced:
                logp_high = lmu
            else:
                same = np.array_equal(alloc, prev)
                logp_high = math.log((1 - beta) * same + beta * math.exp(lmu))

        powers = np.zeros(self.M)
        agents, lo_l, hi_l = [], [], []
        for m in np.flatnonzero(alloc):
            lo, hi = feasible_power_range(state.local(m), 1, cfg)
            if lo < hi:
                agents.append(m)
                lo_l.append(lo)
                hi_l.append(hi)
            else:
                powers[m] = lo
        agents = np.array(agents, dtype=int)
        if agents.size:
            lobs = encode_locals(state, agents, alloc, cfg)
            mean = self.snapshots()[2](lobs)[:, 0]
            lo_a, hi_a = np.array(lo_l), np.array(hi_l)
            a, z, lp = self.power_head.sample(mean, lo_a, hi_a, rng, greedy)
            powers[agents] = a
        else:
            lobs = np.zeros((0, self.ldim))
            lo_a = hi_a = z = lp = np.zeros(0)
        return Decision(alloc, option_index, beta, forced, logp_high, option_probs, powers,
                        agents, lobs, z, lo_a, hi_a, lp, g)

    # ------------------------------------------------------------------ likelihoods
    def high_log_prob(self, gobs, status, prev, alloc, option_index, forced):
        """Differentiable log pi_H(omega_t | S_t) for a batch (enumeration mode)."""
        head = self.alloc_head
        gobs_t = torch.as_tensor(gobs)
        logits = self.high(gobs_t)
        forced_t = torch.as_tensor(forced, dtype=torch.bool)
        x = self.termination_logit(gobs_t)
        log_b = torch.where(forced_t, torch.zeros_like(x), F.logsigmoid(x))
        log_1mb = torch.where(forced_t, torch.full_like(x, -math.inf), F.logsigmoid(-x))
        same = torch.as_tensor(np.all(np.asarray(prev) == np.asarray(alloc), axis=1))
        if head.mode == "enumeration":
            mask = torch.as_tensor(np.array([head.table.feasible_mask(s) for s in status]))
            lmu_all = head.option_log_probs(logits, mask)
            lmu = lmu_all.gather(1, torch.as_tensor(option_index).long().unsqueeze(1)).squeeze(1)
        else:
            lmu = torch.stack([head.log_prob(logits[i], alloc[i], status[i])
                               for i in range(len(alloc))])
        keep = torch.logaddexp(log_1mb, log_b + lmu)
        return torch.where(same, keep, log_b + lmu)

    def low_log_prob(self, lobs, z, lo, hi):
        mean = self.low(torch.as_tensor(lobs)).squeeze(-1)
        return self.power_head.log_prob(mean, torch.as_tensor(z), torch.as_tensor(lo),
                                        torch.as_tensor(hi))

    def actor_parameters(self):
        return list(self.high.parameters()) + list(self.term.parameters())

    def low_parameters(self):
        return list(self.low.parameters()) + list(self.power_head.parameters())


def run_episode(env: FleetEnv, agent: Agent, rng: np.random.Generator, greedy=False,
                record=None, state: GlobalState | None = None, first_option=None):
    """Roll one episode; returns ``(R_0, C_0, any_violation)``.

    ``record`` (a list) receives ``(state, decision, outcome)`` triples.
    ``first_option`` pins the option chosen at the starting state.
    """
    s = env.reset(rng) if state is None else state
    ret = cost = 0.0
    violated = False
    first = True
    while s.t < env.T:
        d = agent.act(s, rng, greedy, force_option=first_option if first else None)
        first = False
        out = env.step(s, d.alloc, d.powers, rng)
        if record is not None:
            record.append((s, d, out))
        ret += out.operational_reward
        cost += out.safety_cost
        violated |= out.safety_cost > 0
        s = out.next_state
    return ret, cost, violated
