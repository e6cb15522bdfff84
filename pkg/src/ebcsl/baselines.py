"""Perfect-information DP oracle, open-loop forecast baseline and the evaluation harness."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .data import PriceTrace, PvTrace, ScenarioConfig, TravelTimeModel, travel_pmf
from .env import FleetEnv
from .neural import OptionTable


class OracleInfeasible(ValueError):
    """No schedule keeps every EB at or above the SoC floor."""


@dataclass(frozen=True)
class OracleConfig:
    power_levels: tuple = (-120.0, -60.0, 0.0, 60.0, 120.0)
    max_state_bins: int = 241
    horizon: int | None = None    # None: the whole day
    max_work: int = 10 ** 7       # cap on states x actions per step

    def check(self, config: ScenarioConfig) -> int:
        """Validate against a scenario; returns the effective horizon."""
        levels = [float(p) for p in self.power_levels]
        if 0.0 not in levels:
            raise ValueError("power_levels must include 0")
        if len(set(levels)) != len(levels):
            raise ValueError("power_levels must be distinct")
        if min(levels) < -config.p_dis_max or max(levels) > config.p_ch_max:
            raise ValueError("power_levels must lie within [-p_dis_max, p_ch_max]")
        if self.max_state_bins < 2:
            raise ValueError("max_state_bins must be >= 2")
        H = config.T if self.horizon is None else int(self.horizon)
        if not 1 <= H <= config.T:
            raise ValueError(f"horizon must lie in [1, {config.T}]")
        return H


class OracleResult(NamedTuple):
    value: float
    allocs: np.ndarray      # (H, M)
    powers: np.ndarray      # (H, M) including operating drain
    energy: np.ndarray      # (H + 1, M) on the energy grid
    status: np.ndarray      # (H + 1, M)
    slack: float            # cost of one power quantum per charger per step, summed


# ---------------------------------------------------------------------- deterministic scenarios
def _modal_steps(model: TravelTimeModel, mean: float, sd: float) -> int:
    probe = TravelTimeModel(model.step_minutes, mean, sd, mean, sd, (), model.min_steps,
                            model.max_steps)
    return int(np.argmax(travel_pmf(probe, 0)))


def deterministic_travel(model: TravelTimeModel) -> TravelTimeModel:
    """Point-mass travel model at the modal step count of each regime."""
    dt = model.step_minutes
    peak = _modal_steps(model, model.peak_mean, model.peak_sd)
    off = _modal_steps(model, model.offpeak_mean, model.offpeak_sd)
    return TravelTimeModel(dt, peak * dt, 0.0, off * dt, 0.0, model.peak_windows,
                           model.min_steps, model.max_steps)


def make_deterministic(config: ScenarioConfig) -> ScenarioConfig:
    """Modal travel times and mid-band drain; prices and PV as given."""
    lo, hi = config.consumption_band
    mid = (lo + hi) / 2.0
    a, b = config.initial_soc_range
    soc = (a + b) / 2.0
    return config.replace(travel=deterministic_travel(config.travel), consumption_band=(mid, mid),
                          initial_soc_range=(soc, soc), trace_days="first",
                          name=config.name + "-deterministic")


def _is_deterministic(env: FleetEnv) -> bool:
    c = env.config
    if c.consumption_band[0] != c.consumption_band[1]:
        return False
    for m in range(env.M):
        for d in env.deps[m]:
            if np.count_nonzero(env.pmf(int(d))) != 1:
                return False
    return True


def status_path(config: ScenarioConfig, horizon: int) -> np.ndarray:
    """Station status of every EB at steps 0..horizon of a deterministic day."""
    env = FleetEnv(config)
    if not _is_deterministic(env):
        raise ValueError("oracle needs deterministic travel times and drain")
    rng = np.random.default_rng(0)
    s = env.reset(rng, day=0)
    # energy does not influence the status path; start full so drain never clips
    object.__setattr__(s, "energy", np.full(env.M, config.e_max))
    out = [s.status.copy()]
    zero = np.zeros(env.M, dtype=int)
    for _ in range(horizon):
        s = env.step(s, zero, np.zeros(env.M), rng).next_state
        out.append(s.status.copy())
    return np.array(out)


# ---------------------------------------------------------------------- the model the oracle plans on
class _Plan:
    """Per-step action lists and vectorized transitions on the energy grid."""

    def __init__(self, config: ScenarioConfig, oc: OracleConfig):
        self.c = config
        self.H = oc.check(config)
        self.M = config.fleet_size
        self.bins = oc.max_state_bins
        self.res = config.e_max / (self.bins - 1)
        self.levels = sorted((float(p) for p in oc.power_levels), key=lambda p: (abs(p), p))
        self.table = OptionTable(self.M, config.charger_count)
        self.status = status_path(config, self.H)
        n = config.price.values.size
        self.rho = np.array([config.price.values[t % n] for t in range(self.H)])
        self.pv = np.array([config.pv.values[t % n] for t in range(self.H)])
        self.drain = config.consumption_band[0]
        self.actions = [self._actions(t) for t in range(self.H)]

    def _actions(self, t):
        """(option index, level vector) pairs, ordered for tie-breaking."""
        status = self.status[t]
        mask = self.table.feasible_mask(status)
        acts = []
        for j in np.flatnonzero(mask):
            bits = self.table.options[j]
            on = np.flatnonzero(bits)
            for combo in itertools.product(self.levels, repeat=on.size):
                lv = np.zeros(self.M)
                lv[on] = combo
                acts.append((int(j), lv))
        acts.sort(key=lambda a: (float(np.sum(np.abs(a[1]))), a[0]))
        return acts

    def snap(self, E):
        return np.clip(np.rint(np.asarray(E) / self.res), 0, self.bins - 1).astype(np.int64)

    def transition(self, t, E, option, levels):
        """Costs and next energy for one action over a batch of energy rows.

        ``E`` has shape (S, M). Returns ``(base_cost, next_E, powers, ok)``
        where base_cost excludes switching.
        """
        c = self.c
        dt = c.dt
        bits = self.table.options[option]
        status = self.status[t]
        S = E.shape[0]
        ok = np.ones(S, dtype=bool)
        powers = np.zeros((S, self.M))
        for m in range(self.M):
            e = E[:, m]
            if status[m] == 1:
                if bits[m]:
                    lo = np.maximum(-c.p_dis_max, (c.e_min - e) / dt)
                    hi = np.minimum(c.p_ch_max, (c.e_max - e) / dt)
                    lo = np.minimum(lo, hi)
                    tol = 1e-9 * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
                    ok &= (levels[m] >= lo - tol) & (levels[m] <= hi + tol)
                    powers[:, m] = levels[m]
            else:
                lo = np.maximum(-c.p_dis_max, -e / dt)
                powers[:, m] = np.minimum(np.maximum(-self.drain, lo), 0.0)
        load = np.zeros(S)
        for m in range(self.M):
            if c.grid_scope == "all" or status[m] == 1:
                load = load + powers[:, m]
        net = load - self.pv[t]
        p_buy = np.maximum(net, 0.0)
        p_sell = np.maximum(-net, 0.0)
        cost = self.rho[t] * (p_buy - c.sell_discount * p_sell) * dt
        deg = c.zeta_b * abs(c.bk_slope / 100.0)
        for m in range(self.M):
            if status[m] == 1:
                cost = cost + deg * np.abs(powers[:, m] / c.battery_kwh)
        nxt = np.clip(E + powers * dt, 0.0, c.e_max)
        return cost, nxt, powers, ok

    def switch_cost(self, t, option):
        """Switching cost for each previous option index, shape (P,)."""
        c = self.c
        bits = self.table.options[option]
        prev = self.table.options
        return np.sum(c.zeta_s * prev * (1 - bits) * self.status[t], axis=1)

    def slack(self, oc: OracleConfig) -> float:
        lv = np.unique(np.asarray(oc.power_levels, dtype=float))
        q = float(np.min(np.diff(lv))) if lv.size > 1 else 0.0
        c = self.c
        per = np.maximum(self.rho, 0.0) * q * c.dt + c.zeta_b * abs(c.bk_slope / 100.0) * q / c.battery_kwh
        return float(np.sum(per) * c.charger_count)


def _initial_energy(config: ScenarioConfig, initial_energy):
    if initial_energy is None:
        a, b = config.initial_soc_range
        return np.full(config.fleet_size, (a + b) / 2.0 * config.battery_kwh)
    e = np.asarray(initial_energy, dtype=float)
    if e.shape != (config.fleet_size,):
        raise ValueError("initial_energy must have one entry per EB")
    return e


def dp_oracle(config: ScenarioConfig, oc: OracleConfig = OracleConfig(),
              initial_energy=None) -> OracleResult:
    """Backward induction over (energy grid, previous allocation).

    Energy snaps to the nearest grid point after every transition. The SoC
    floor is a hard constraint at every step including the last.
    """
    plan = _Plan(config, oc)
    M, H, B = plan.M, plan.H, plan.bins
    S = B ** M
    P = len(plan.table)
    worst = max(len(a) for a in plan.actions)
    if S * worst > oc.max_work:
        raise ValueError(f"oracle instance too large: {S} states x {worst} actions "
                         f"exceeds {oc.max_work}")
    grid = np.stack(np.unravel_index(np.arange(S), (B,) * M), axis=1)   # (S, M) bin indices
    E = grid * plan.res
    floor_ok = np.all(E >= config.e_min - 1e-9, axis=1)
    radix = B ** np.arange(M - 1, -1, -1)

    V = np.where(floor_ok, 0.0, -np.inf)[:, None].repeat(P, axis=1)
    best = np.zeros((H, S, P), dtype=np.int32)
    for t in range(H - 1, -1, -1):
        Vt = np.full((S, P), -np.inf)
        bt = np.zeros((S, P), dtype=np.int32)
        for k, (opt, lv) in enumerate(plan.actions[t]):
            cost, nxt, _, ok = plan.transition(t, E, opt, lv)
            s1 = plan.snap(nxt) @ radix
            sw = plan.switch_cost(t, opt)
            q = -(cost[:, None] + sw[None, :]) + V[s1, opt][:, None]
            q[~(ok & floor_ok)] = -np.inf
            better = q > Vt
            Vt = np.where(better, q, Vt)
            bt = np.where(better, k, bt)
        V, best[t] = Vt, bt

    e0 = _initial_energy(config, initial_energy)
    i0 = plan.snap(e0)
    s = int(i0 @ radix)
    value = float(V[s, 0])
    if not math.isfinite(value):
        raise OracleInfeasible(
            f"no schedule keeps every EB above {config.e_min:g} kWh over {H} steps")
    allocs = np.zeros((H, M), dtype=int)
    powers = np.zeros((H, M))
    energy = np.zeros((H + 1, M))
    energy[0] = i0 * plan.res
    prev = 0
    for t in range(H):
        opt, lv = plan.actions[t][best[t, s, prev]]
        _, nxt, pw, _ = plan.transition(t, energy[t][None, :], opt, lv)
        allocs[t] = plan.table.options[opt]
        powers[t] = pw[0]
        idx = plan.snap(nxt[0])
        energy[t + 1] = idx * plan.res
        s, prev = int(idx @ radix), opt
    return OracleResult(value, allocs, powers, energy, plan.status, plan.slack(oc))


def enumeration_oracle(config: ScenarioConfig, oc: OracleConfig = OracleConfig(),
                       initial_energy=None, max_sequences: int = 10 ** 5) -> float:
    """Best return over every action sequence, simulated forward on the same grid."""
    plan = _Plan(config, oc)
    count = math.prod(len(a) for a in plan.actions)
    if count > max_sequences:
        raise ValueError(f"{count} action sequences exceed {max_sequences}")
    e0 = plan.snap(_initial_energy(config, initial_energy)) * plan.res
    best = -math.inf
    for seq in itertools.product(*plan.actions):
        E = e0[None, :]
        if np.any(E < config.e_min - 1e-9):
            break
        rewards = []
        prev = 0
        feasible = True
        for t, (opt, lv) in enumerate(seq):
            cost, nxt, _, ok = plan.transition(t, E, opt, lv)
            sw = plan.switch_cost(t, opt)[prev]
            E = plan.snap(nxt) * plan.res
            if not ok[0] or np.any(E < config.e_min - 1e-9):
                feasible = False
                break
            rewards.append(-(cost[0] + sw))
            prev = opt
        if not feasible:
            continue
        total = 0.0
        for r in reversed(rewards):
            total = r + total
        best = max(best, total)
    if not math.isfinite(best):
        raise OracleInfeasible("every action sequence breaches the SoC floor")
    return float(best)


# ---------------------------------------------------------------------- evaluation
@dataclass(frozen=True)
class EpisodeRecord:
    seed: int
    operational_return: float
    safety_return: float
    violated: bool


@dataclass
class EvalReport:
    episodes: int
    avg_operational_return: float
    safety_violation_rate: float
    records: list = field(default_factory=list)

    @classmethod
    def from_records(cls, records) -> "EvalReport":
        records = list(records)
        n = len(records)
        if n == 0:
            return cls(0, float("nan"), 0.0, [])
        ret = math.fsum(r.operational_return for r in records) / n
        rate = sum(1 for r in records if r.violated) / n
        return cls(n, ret, rate, records)

    @property
    def avg_safety_return(self) -> float:
        return math.fsum(r.safety_return for r in self.records) / max(len(self.records), 1)

    def to_dict(self) -> dict:
        return {"episodes": self.episodes,
                "avg_operational_return": self.avg_operational_return,
                "safety_violation_rate": self.safety_violation_rate,
                "avg_safety_return": self.avg_safety_return,
                "records": [asdict(r) for r in self.records]}

    def write(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def episode_seeds(rng: np.random.Generator, n: int) -> list[int]:
    return [int(x) for x in rng.integers(0, 2 ** 63 - 1, size=n)]


def evaluate_policy(policy, scenario: ScenarioConfig, num_episodes: int,
                    rng: np.random.Generator, traces: list | None = None) -> EvalReport:
    """Greedy rollouts, one independent stream per episode.

    ``policy`` needs ``act(state, rng, greedy)`` returning an object with
    ``alloc`` and ``powers``. When ``traces`` is a list, the first episode's
    ``(state, decision, outcome)`` triples are appended to it.
    """
    from .policy import run_episode

    env = FleetEnv(scenario)
    records = []
    for i, seed in enumerate(episode_seeds(rng, num_episodes)):
        rec = traces if (traces is not None and i == 0) else None
        r, c, v = run_episode(env, policy, np.random.default_rng(seed), greedy=True, record=rec)
        records.append(EpisodeRecord(seed, float(r), float(c), bool(v)))
    return EvalReport.from_records(records)


# ---------------------------------------------------------------------- forecast baseline
PRICE_INTERVAL_HOURS = ((0, 6), (6, 9), (9, 14), (14, 17), (17, 21), (21, 24))


@dataclass(frozen=True, eq=False)
class ForecastModel:
    price_intervals: tuple        # ((start_h, end_h, value), ...)
    pv_profile: np.ndarray        # (T,)
    travel: TravelTimeModel       # point-mass model

    def __post_init__(self):
        edges = [(a, b) for a, b, _ in self.price_intervals]
        if edges[0][0] != 0 or edges[-1][1] != 24 or any(
                b != a2 for (_, b), (a2, _) in zip(edges, edges[1:])):
            raise ValueError("price intervals must partition the day")

    @classmethod
    def fit(cls, config: ScenarioConfig, days=None) -> "ForecastModel":
        """Interval-average prices and step-average PV over the training days."""
        tb = config.timebase
        T = tb.steps_per_day
        days = range(config.num_days) if days is None else days
        price = np.stack([config.price.day(d, tb) for d in days])
        pv = np.stack([config.pv.day(d, tb) for d in days])
        intervals = []
        for a, b in PRICE_INTERVAL_HOURS:
            sl = slice(tb.step_of(a), tb.step_of(b) if b < 24 else T)
            intervals.append((a, b, float(price[:, sl].mean())))
        return cls(tuple(intervals), pv.mean(axis=0), deterministic_travel(config.travel))

    def price_profile(self, config: ScenarioConfig) -> np.ndarray:
        tb = config.timebase
        out = np.empty(tb.steps_per_day)
        for a, b, v in self.price_intervals:
            out[tb.step_of(a):(tb.step_of(b) if b < 24 else tb.steps_per_day)] = v
        return out

    def scenario(self, config: ScenarioConfig) -> ScenarioConfig:
        """The deterministic day the baseline plans against."""
        det = make_deterministic(config)
        return det.replace(price=PriceTrace(self.price_profile(config)),
                           pv=PvTrace(self.pv_profile), travel=self.travel,
                           name=config.name + "-forecast")


class _Act(NamedTuple):
    alloc: np.ndarray
    powers: np.ndarray


class OpenLoopPolicy:
    """Replays a precomputed schedule; drops absent EBs and clips powers."""

    def __init__(self, config: ScenarioConfig, allocs, powers):
        self.config = config
        self.allocs = np.asarray(allocs, dtype=int)
        self.powers = np.asarray(powers, dtype=float)
        self._env = FleetEnv(config)

    def act(self, state, rng=None, greedy=True, force_option=None) -> _Act:
        t = state.t
        if t >= len(self.allocs):
            alloc = np.zeros(self.config.fleet_size, dtype=int)
            return _Act(alloc, np.zeros(self.config.fleet_size))
        alloc = self.allocs[t] * state.status
        lo, hi = self._env.power_ranges(state, alloc)
        return _Act(alloc, np.clip(self.powers[t], lo, hi) * alloc)


def forecast_baseline(config: ScenarioConfig, forecast: ForecastModel, oc: OracleConfig,
                      num_episodes: int, rng: np.random.Generator, traces=None):
    """Plan once on the forecast day, execute open-loop on stochastic days.

    Returns ``(report, plan)``.
    """
    plan = dp_oracle(forecast.scenario(config), oc)
    policy = OpenLoopPolicy(config, plan.allocs, plan.powers)
    return evaluate_policy(policy, config, num_episodes, rng, traces), plan
