"""Primal-dual training of the hierarchical agent (PPO-Lagrangian high level, MAPPO-Lagrangian low level)."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import ScenarioConfig
from .env import FleetEnv
from .neural import Optimizer
from .policy import Agent, NetworkSizes, run_episode

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "mean_return", "mean_safety", "lambda_H", "lambda_L",
                  "loss_H", "loss_L", "mse_R", "mse_C", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20000
    episodes_per_iter: int = 10
    clip: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.99
    batch_size: int = 128
    epochs: int = 4
    lr_actor: float = 3e-4
    lr_termination: float = 3e-4
    lr_low: float = 3e-4
    lr_critic: float = 1e-3
    lambda_lr: float = 0.01
    tolerance: float = 0.025
    lambda_init: float = 0.0
    # "lagrangian" updates both multipliers; "fixed" holds them at fixed_lambda
    mode: str = "lagrangian"
    fixed_lambda: float = 2.5
    entropy_coef: float = 0.0
    normalize_advantages: bool = True
    max_grad_norm: float = 0.5
    # linearly decay every learning rate to zero over ``iterations``
    lr_anneal: bool = False
    sizes: NetworkSizes = field(default_factory=NetworkSizes)
    value_scale: tuple = (1.0, 1.0)
    init_log_std: float = math.log(0.5)
    alloc_mode: str | None = None
    seed: int = 0
    record_wall_time: bool = True

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not (0 < self.gae_lambda <= 1 and 0 < self.gamma <= 1):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.mode not in ("lagrangian", "fixed"):
            raise ValueError("mode must be 'lagrangian' or 'fixed'")
        if self.episodes_per_iter < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("episodes_per_iter, batch_size and epochs must be positive")

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------- buffer
@dataclass
class RolloutBuffer:
    """Transitions of E complete episodes, step-major within each episode."""

    gobs: np.ndarray          # (S, gdim)
    status: np.ndarray        # (S, M)
    prev_alloc: np.ndarray    # (S, M)
    alloc: np.ndarray         # (S, M)
    option_index: np.ndarray  # (S,)
    forced: np.ndarray        # (S,)
    beta: np.ndarray          # (S,)
    logp_high: np.ndarray     # (S,)
    option_probs: np.ndarray  # (S, K)
    rewards: np.ndarray       # (S,)
    costs: np.ndarray         # (S,)
    episode: np.ndarray       # (S,) episode id
    # low-level (agent, step) pairs
    lobs: np.ndarray          # (P, ldim)
    z: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    logp_low: np.ndarray
    pair_step: np.ndarray     # (P,) row into the step arrays
    pair_agent: np.ndarray    # (P,)
    episodes: int = 0

    def __len__(self):
        return self.rewards.size

    def episode_slices(self):
        bounds = np.flatnonzero(np.diff(self.episode)) + 1
        starts = np.concatenate([[0], bounds])
        ends = np.concatenate([bounds, [self.rewards.size]])
        return [slice(a, b) for a, b in zip(starts, ends)]

    def controlled_mask(self) -> np.ndarray:
        """(S, M) indicator of EBs driven by the low-level actor."""
        mask = np.zeros_like(self.alloc)
        mask[self.pair_step, self.pair_agent] = 1
        return mask


def collect_rollouts(env: FleetEnv, agent: Agent, episodes: int,
                     rng: np.random.Generator) -> RolloutBuffer:
    """Run ``episodes`` full episodes with per-episode seeded streams."""
    seeds = rng.integers(0, 2 ** 63 - 1, size=episodes)
    cols = {k: [] for k in ("gobs", "status", "prev_alloc", "alloc", "option_index", "forced",
                            "beta", "logp_high", "option_probs", "rewards", "costs", "episode",
                            "lobs", "z", "lo", "hi", "logp_low", "pair_step", "pair_agent")}
    row = 0
    for e, seed in enumerate(seeds):
        record = []
        run_episode(env, agent, np.random.default_rng(int(seed)), record=record)
        for s, d, out in record:
            cols["gobs"].append(d.global_obs)
            cols["status"].append(s.status)
            cols["prev_alloc"].append(s.prev_alloc)
            cols["alloc"].append(d.alloc)
            cols["option_index"].append(d.option_index)
            cols["forced"].append(d.forced)
            cols["beta"].append(d.beta)
            cols["logp_high"].append(d.logp_high)
            cols["option_probs"].append(d.option_probs)
            cols["rewards"].append(out.operational_reward)
            cols["costs"].append(out.safety_cost)
            cols["episode"].append(e)
            for j, m in enumerate(d.agents):
                cols["lobs"].append(d.local_obs[j])
                cols["z"].append(d.z[j])
                cols["lo"].append(d.lo[j])
                cols["hi"].append(d.hi[j])
                cols["logp_low"].append(d.logp_low[j])
                cols["pair_step"].append(row)
                cols["pair_agent"].append(m)
            row += 1
    arr = {k: np.array(v) for k, v in cols.items()}
    if arr["lobs"].size == 0:
        arr["lobs"] = np.zeros((0, agent.ldim))
    arr["pair_step"] = arr["pair_step"].astype(int)
    arr["pair_agent"] = arr["pair_agent"].astype(int)
    arr["option_index"] = arr["option_index"].astype(int)
    arr["forced"] = arr["forced"].astype(bool)
    return RolloutBuffer(**arr, episodes=episodes)


# ---------------------------------------------------------------------- returns and advantages
def suffix_sums(x) -> np.ndarray:
    """Undiscounted returns-to-go of one episode."""
    x = np.asarray(x, dtype=float)
    return np.cumsum(x[::-1])[::-1].copy()


def compute_returns(buffer: RolloutBuffer):
    R = np.empty(len(buffer))
    C = np.empty(len(buffer))
    for sl in buffer.episode_slices():
        R[sl] = suffix_sums(buffer.rewards[sl])
        C[sl] = suffix_sums(buffer.costs[sl])
    return R, C


def gae_advantages(signal, values, gamma: float, gae_lambda: float) -> np.ndarray:
    """GAE for one episode.

    ``values`` has one more entry than ``signal``; the last is the value
    after the final step (0 at the end of the day).
    """
    x = np.asarray(signal, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.size != x.size + 1:
        raise ValueError("values must have len(signal) + 1 entries")
    adv = np.zeros(x.size)
    acc = 0.0
    for t in range(x.size - 1, -1, -1):
        delta = x[t] + gamma * v[t + 1] - v[t]
        acc = delta + gamma * gae_lambda * acc
        adv[t] = acc
    return adv


def adjusted_advantages(adv_opr, adv_safe, lam: float) -> np.ndarray:
    return np.asarray(adv_opr, dtype=float) - lam * np.asarray(adv_safe, dtype=float)


@dataclass
class AdvantageSet:
    opr_H: np.ndarray
    safe_H: np.ndarray
    opr_L: np.ndarray
    safe_L: np.ndarray
    R: np.ndarray
    C: np.ndarray
    adj_H: np.ndarray | None = None
    adj_L: np.ndarray | None = None


def critic_predictions(agent: Agent, buffer: RolloutBuffer):
    """Low-level values V(S_t, w_t) and option-marginalized high-level values V_H(S_t)."""
    with torch.no_grad():
        vr_l, vc_l = agent.values(buffer.gobs, buffer.alloc)
        vr_l, vc_l = vr_l.numpy(), vc_l.numpy()
        head = agent.alloc_head
        if head.mode == "enumeration":
            K = len(head.table)
            S = len(buffer)
            g = np.repeat(buffer.gobs, K, axis=0)
            opts = np.tile(head.table.options, (S, 1))
            vr_all, vc_all = agent.values(g, opts)
            vr_h = np.sum(buffer.option_probs * vr_all.numpy().reshape(S, K), axis=1)
            vc_h = np.sum(buffer.option_probs * vc_all.numpy().reshape(S, K), axis=1)
        else:
            # sampled option is an unbiased draw of the marginal; used as a fallback
            vr_h, vc_h = vr_l, vc_l
    return vr_l, vc_l, vr_h, vc_h


def compute_advantages(agent: Agent, buffer: RolloutBuffer, gamma: float,
                       gae_lambda: float) -> AdvantageSet:
    R, C = compute_returns(buffer)
    vr_l, vc_l, vr_h, vc_h = critic_predictions(agent, buffer)
    n = len(buffer)
    out = {k: np.empty(n) for k in ("opr_H", "safe_H", "opr_L", "safe_L")}
    for sl in buffer.episode_slices():
        r, c = buffer.rewards[sl], buffer.costs[sl]
        out["opr_L"][sl] = gae_advantages(r, np.append(vr_l[sl], 0.0), gamma, gae_lambda)
        out["safe_L"][sl] = gae_advantages(c, np.append(vc_l[sl], 0.0), gamma, gae_lambda)
        out["opr_H"][sl] = gae_advantages(r, np.append(vr_h[sl], 0.0), gamma, gae_lambda)
        out["safe_H"][sl] = gae_advantages(c, np.append(vc_h[sl], 0.0), gamma, gae_lambda)
    return AdvantageSet(R=R, C=C, **out)


# ---------------------------------------------------------------------- objectives
def clipped_surrogate(logp_new, logp_old, adv, clip: float):
    """Mean of ``min(ratio * A, clip(ratio) * A)`` over finite-ratio samples.

    Returns ``(objective, excluded_count)``.
    """
    ratio = torch.exp(logp_new - torch.as_tensor(logp_old))
    adv = torch.as_tensor(adv)
    ok = torch.isfinite(ratio)
    excluded = int((~ok).sum())
    if not ok.any():
        return torch.zeros((), dtype=torch.float64), excluded
    ratio, adv = ratio[ok], adv[ok]
    surr = torch.minimum(ratio * adv, torch.clamp(ratio, 1 - clip, 1 + clip) * adv)
    return surr.mean(), excluded


def high_ppo_objective(agent: Agent, buffer: RolloutBuffer, idx, adv_adj, clip: float):
    lp = agent.high_log_prob(buffer.gobs[idx], buffer.status[idx], buffer.prev_alloc[idx],
                             buffer.alloc[idx], buffer.option_index[idx], buffer.forced[idx])
    return clipped_surrogate(lp, buffer.logp_high[idx], adv_adj[idx], clip)


def low_mappo_objective(agent: Agent, buffer: RolloutBuffer, pidx, adv_adj_steps, clip: float):
    """Clipped objective over controlled (agent, step) pairs sharing the step's advantage."""
    if len(pidx) == 0:
        return torch.zeros((), dtype=torch.float64), 0
    lp = agent.low_log_prob(buffer.lobs[pidx], buffer.z[pidx], buffer.lo[pidx], buffer.hi[pidx])
    adv = adv_adj_steps[buffer.pair_step[pidx]]
    return clipped_surrogate(lp, buffer.logp_low[pidx], adv, clip)


def critic_objectives(agent: Agent, buffer: RolloutBuffer, idx, R, C):
    vr, vc = agent.values(buffer.gobs[idx], buffer.alloc[idx])
    mse_r = torch.mean((vr - torch.as_tensor(R[idx])) ** 2)
    mse_c = torch.mean((vc - torch.as_tensor(C[idx])) ** 2)
    return mse_r, mse_c


@dataclass(frozen=True)
class LagrangeState:
    lambda_H: float = 0.0
    lambda_L: float = 0.0
    tolerance: float = 0.025
    lr: float = 0.01

    def __post_init__(self):
        if self.lambda_H < 0 or self.lambda_L < 0:
            raise ValueError("Lagrange multipliers must be non-negative")


def update_lambdas(lag: LagrangeState, j_safe_H: float, j_safe_L: float) -> LagrangeState:
    """Projected dual ascent: ``lambda <- max(0, lambda + lr * (J_safe - d))``."""
    lh = max(0.0, lag.lambda_H + lag.lr * (j_safe_H - lag.tolerance))
    ll = max(0.0, lag.lambda_L + lag.lr * (j_safe_L - lag.tolerance))
    return replace(lag, lambda_H=lh, lambda_L=ll)


def _normalize(x: np.ndarray) -> np.ndarray:
    if x.size < 2:
        return x - x.mean() if x.size else x
    return (x - x.mean()) / (x.std() + 1e-8)


# ---------------------------------------------------------------------- trainer
class NonFiniteLoss(FloatingPointError):
    pass


class Trainer:
    def __init__(self, scenario: ScenarioConfig, cfg: TrainConfig, agent: Agent | None = None):
        self.scenario = scenario
        self.cfg = cfg
        self.env = FleetEnv(scenario)
        torch.manual_seed(cfg.seed)
        self.agent = agent or Agent(scenario, cfg.sizes, seed=cfg.seed, alloc_mode=cfg.alloc_mode,
                                    init_log_std=cfg.init_log_std, value_scale=cfg.value_scale)
        a = self.agent
        self.opt_high = Optimizer(
            [{"params": list(a.high.parameters()), "lr": cfg.lr_actor},
             {"params": list(a.term.parameters()), "lr": cfg.lr_termination}],
            lr=cfg.lr_actor, max_grad_norm=cfg.max_grad_norm)
        self.opt_low = Optimizer(a.low_parameters(), cfg.lr_low, cfg.max_grad_norm)
        self.opt_r = Optimizer(a.critic_r.parameters(), cfg.lr_critic, cfg.max_grad_norm)
        self.opt_c = Optimizer(a.critic_c.parameters(), cfg.lr_critic, cfg.max_grad_norm)
        lam0 = cfg.fixed_lambda if cfg.mode == "fixed" else cfg.lambda_init
        self.lagrange = LagrangeState(lam0, lam0, cfg.tolerance, cfg.lambda_lr)
        self.rng = np.random.default_rng(cfg.seed)
        self.iteration = 0
        self.excluded = 0
        self.dump_dir = Path(".")
        self._base_lr = [[g["lr"] for g in o.opt.param_groups]
                         for o in (self.opt_high, self.opt_low, self.opt_r, self.opt_c)]

    def _minibatches(self, n: int):
        order = self.rng.permutation(n)
        bs = self.cfg.batch_size
        return [order[i:i + bs] for i in range(0, n, bs)]

    def _set_lr(self):
        frac = max(0.0, 1.0 - self.iteration / max(self.cfg.iterations, 1))
        for o, base in zip((self.opt_high, self.opt_low, self.opt_r, self.opt_c), self._base_lr):
            for g, lr in zip(o.opt.param_groups, base):
                g["lr"] = lr * frac

    def train_iteration(self) -> dict:
        cfg, agent = self.cfg, self.agent
        t0 = time.perf_counter()
        if cfg.lr_anneal:
            self._set_lr()
        buf = collect_rollouts(self.env, agent, cfg.episodes_per_iter, self.rng)
        adv = compute_advantages(agent, buf, cfg.gamma, cfg.gae_lambda)
        lag = self.lagrange
        adj_H = adjusted_advantages(adv.opr_H, adv.safe_H, lag.lambda_H)
        adj_L = adjusted_advantages(adv.opr_L, adv.safe_L, lag.lambda_L)
        if cfg.normalize_advantages:
            adj_H = _normalize(adj_H)
            if buf.pair_step.size:
                used = np.unique(buf.pair_step)
                adj_L = adj_L.copy()
                adj_L[used] = _normalize(adj_L[used])
        adv.adj_H, adv.adj_L = adj_H, adj_L

        loss_h, n_h = 0.0, 0
        for _ in range(cfg.epochs):
            for idx in self._minibatches(len(buf)):
                obj, exc = high_ppo_objective(agent, buf, idx, adj_H, cfg.clip)
                self.excluded += exc
                loss = -obj
                if cfg.entropy_coef:
                    loss = loss - cfg.entropy_coef * self._high_entropy(buf, idx)
                self._check(loss, "high-level")
                self.opt_high.step(loss)
                loss_h += loss.item()
                n_h += 1

        loss_l, n_l = 0.0, 0
        P = buf.pair_step.size
        for _ in range(cfg.epochs):
            for pidx in (self._minibatches(P) if P else []):
                obj, exc = low_mappo_objective(agent, buf, pidx, adj_L, cfg.clip)
                self.excluded += exc
                loss = -obj
                if cfg.entropy_coef:
                    loss = loss - cfg.entropy_coef * agent.power_head.entropy_proxy()
                self._check(loss, "low-level")
                self.opt_low.step(loss)
                loss_l += loss.item()
                n_l += 1

        mse_r_sum = mse_c_sum = 0.0
        n_c = 0
        for _ in range(cfg.epochs):
            for idx in self._minibatches(len(buf)):
                mse_r, mse_c = critic_objectives(agent, buf, idx, adv.R, adv.C)
                self._check(mse_r + mse_c, "critic")
                self.opt_r.step(mse_r)
                self.opt_c.step(mse_c)
                mse_r_sum += mse_r.item()
                mse_c_sum += mse_c.item()
                n_c += 1

        starts = [sl.start for sl in buf.episode_slices()]
        mean_return = float(np.mean(adv.R[starts]))
        j_safe = float(np.mean(adv.C[starts]))
        if cfg.mode == "lagrangian":
            self.lagrange = update_lambdas(self.lagrange, j_safe, j_safe)

        self.iteration += 1
        wall = (time.perf_counter() - t0) * 1000 if cfg.record_wall_time else 0.0
        return {"iteration": self.iteration, "mean_return": mean_return, "mean_safety": j_safe,
                "lambda_H": self.lagrange.lambda_H, "lambda_L": self.lagrange.lambda_L,
                "loss_H": loss_h / max(n_h, 1), "loss_L": loss_l / max(n_l, 1),
                "mse_R": mse_r_sum / max(n_c, 1), "mse_C": mse_c_sum / max(n_c, 1),
                "wall_ms": wall}

    def _high_entropy(self, buf, idx):
        head = self.agent.alloc_head
        if head.mode != "enumeration":
            return torch.zeros((), dtype=torch.float64)
        logits = self.agent.high(torch.as_tensor(buf.gobs[idx]))
        mask = torch.as_tensor(np.array([head.table.feasible_mask(s) for s in buf.status[idx]]))
        lp = head.option_log_probs(logits, mask)
        p = torch.exp(lp)
        return -(torch.where(mask, p * lp, torch.zeros_like(lp))).sum(1).mean()

    def _check(self, loss, what):
        if not torch.isfinite(loss):
            path = self.dump_dir / f"nonfinite_iter{self.iteration}.bin"
            self.agent.save(path)
            raise NonFiniteLoss(f"non-finite {what} loss at iteration {self.iteration}; "
                                f"parameters dumped to {path}")

    def train(self, iterations: int | None = None, metrics_path=None, ckpt_dir=None,
              ckpt_every: int = 0, callback=None) -> list[dict]:
        n = self.cfg.iterations if iterations is None else iterations
        if ckpt_dir is not None:
            self.dump_dir = Path(ckpt_dir)
        history = []
        fh = writer = None
        if metrics_path is not None:
            fh = open(metrics_path, "w", newline="")
            writer = csv.writer(fh)
            writer.writerow(METRIC_COLUMNS)
        try:
            for _ in range(n):
                rec = self.train_iteration()
                history.append(rec)
                if writer is not None:
                    writer.writerow([rec["iteration"]] + [repr(float(rec[k]))
                                                          for k in METRIC_COLUMNS[1:]])
                    fh.flush()
                if ckpt_dir is not None and ckpt_every and self.iteration % ckpt_every == 0:
                    self.agent.save(Path(ckpt_dir) / f"checkpoint_{self.iteration}.bin",
                                    meta={"iteration": self.iteration,
                                          "lambda_H": self.lagrange.lambda_H,
                                          "lambda_L": self.lagrange.lambda_L})
                if callback is not None:
                    callback(rec)
                if self.iteration % 50 == 0:
                    log.info("iter %d return %.3f safety %.3f lambda %.3f", rec["iteration"],
                             rec["mean_return"], rec["mean_safety"], rec["lambda_H"])
        finally:
            if fh is not None:
                fh.close()
        return history
