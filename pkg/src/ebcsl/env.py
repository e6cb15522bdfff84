"""Electric-bus fleet simulator: charging dynamics, power balance and costs."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import ScenarioConfig, travel_pmf


class ContractViolation(RuntimeError):
    """An action handed to the simulator lies outside its declared space."""


class EbLocalState(NamedTuple):
    energy: float
    status: int
    prev_status: int
    tau: int
    prev_alloc: int
    trip: int


@dataclass(frozen=True, eq=False)
class GlobalState:
    """Fleet state at step ``t``; ``t == T`` marks the post-episode state."""

    energy: np.ndarray
    status: np.ndarray
    prev_status: np.ndarray
    tau: np.ndarray
    prev_alloc: np.ndarray
    trip: np.ndarray
    pv_history: np.ndarray
    price_history: np.ndarray
    t: int
    day: int = 0

    @property
    def fleet_size(self) -> int:
        return self.energy.size

    @property
    def layover(self) -> np.ndarray:
        return np.flatnonzero(self.status == 1)

    @property
    def done(self) -> bool:
        return self.t >= self._T

    def local(self, m: int) -> EbLocalState:
        return EbLocalState(float(self.energy[m]), int(self.status[m]), int(self.prev_status[m]),
                            int(self.tau[m]), int(self.prev_alloc[m]), int(self.trip[m]))

    # set by the environment so `done` works without a config handle
    _T: int = 1 << 30


class StepOutcome(NamedTuple):
    next_state: GlobalState
    operational_reward: float
    safety_cost: float
    charging_cost: float
    degradation_cost: np.ndarray
    switching_cost: np.ndarray
    p_buy: float
    p_sell: float
    powers: np.ndarray
    forced_termination: bool


def feasible_power_range(state: EbLocalState, alloc_bit: int, config: ScenarioConfig):
    """Closed interval of admissible power (kW) for one EB.

    A layover EB below the SoC floor gets a positive lower bound, which
    forces recovery charging; the bound is kept as the equation gives it.
    """
    dt = config.dt
    E = state.energy
    if state.status == 1:
        if not alloc_bit:
            return 0.0, 0.0
        lo = max(-config.p_dis_max, (config.e_min - E) / dt)
        hi = min(config.p_ch_max, (config.e_max - E) / dt)
        if lo > hi:
            # charger cannot lift a deeply depleted battery to the floor in one step
            lo = hi
        return lo, hi
    lo = max(-config.p_dis_max, -E / dt)
    return min(lo, 0.0), 0.0


def grid_split(total_power: float, pv: float):
    """Grid purchase and sale (kW) that balance station load against PV."""
    net = total_power - pv
    if net >= 0:
        return net, 0.0
    return 0.0, -net


def station_load(powers: np.ndarray, status: np.ndarray, config: ScenarioConfig) -> float:
    if config.grid_scope == "all":
        return float(np.sum(powers))
    return float(np.sum(powers[status == 1]))


def operational_cost(state: GlobalState, alloc: np.ndarray, powers: np.ndarray,
                     config: ScenarioConfig):
    """Charging cost, per-EB degradation and per-EB switching costs."""
    rho = state.price_history[-1]
    pv = state.pv_history[-1]
    p_buy, p_sell = grid_split(station_load(powers, state.status, config), pv)
    c_ch = rho * (p_buy - config.sell_discount * p_sell) * config.dt
    c_bat = (config.zeta_b * abs(config.bk_slope / 100.0)
             * np.abs(powers / config.battery_kwh) * state.status)
    c_sw = config.zeta_s * state.prev_alloc * (1 - alloc) * state.status
    return c_ch, c_bat, c_sw


def safety_cost(state: GlobalState, config: ScenarioConfig) -> float:
    """Total kWh by which the fleet sits below the SoC floor."""
    return float(np.sum(np.maximum(0.0, config.e_min - state.energy)))


def termination_prob(state: EbLocalState, pmf: np.ndarray, hazard: str = "product") -> float:
    """Probability that the EB's current layover/operating period ends this step.

    ``pmf[k]`` is the probability that a trip lasts ``k`` steps. With
    ``hazard="product"`` the denominator is the product of per-step
    non-arrival probabilities; ``"exact"`` uses the survival function.
    """
    tau = state.tau
    if state.status == 1:
        return 1.0 if tau == 0 else 0.0
    if tau >= pmf.size - 1 or pmf[tau:].sum() == 0.0:
        return 1.0
    num = pmf[tau]
    if hazard == "exact":
        den = 1.0 - pmf[:tau].sum()
    else:
        den = float(np.prod(1.0 - pmf[:tau]))
    if den <= 0.0:
        if num > 0:
            raise RuntimeError("travel-time pmf support exhausted with remaining mass")
        return 1.0
    return float(min(1.0, max(0.0, num / den)))


class FleetEnv:
    """Stateless simulator: ``reset`` and ``step`` return fresh states."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        c = config
        self.M = c.fleet_size
        self.T = c.T
        self.h = c.timebase.history_window
        self.deps = [np.array(c.timetable.departures(m), dtype=int) for m in range(self.M)]
        self._pmf_cache: dict[int, np.ndarray] = {}

    # ------------------------------------------------------------------ helpers
    def pmf(self, departure_step: int) -> np.ndarray:
        p = self._pmf_cache.get(departure_step)
        if p is None:
            p = travel_pmf(self.config.travel, departure_step)
            self._pmf_cache[departure_step] = p
        return p

    def departure(self, m: int, trip: int) -> int:
        d = self.deps[m]
        return int(d[trip]) if trip < d.size else self.T

    def _histories(self, day: int, t: int):
        c = self.config
        n = c.price.values.size
        idx = (day * self.T + t - np.arange(self.h, -1, -1)) % n
        return c.pv.values[idx].copy(), c.price.values[idx].copy()

    def _make(self, **kw) -> GlobalState:
        s = GlobalState(**kw)
        object.__setattr__(s, "_T", self.T)
        return s

    # ------------------------------------------------------------------ api
    def reset(self, rng: np.random.Generator, day: int | None = None) -> GlobalState:
        c = self.config
        M = self.M
        if day is None:
            day = int(rng.integers(c.num_days)) if c.trace_days == "random" else 0
        lo, hi = c.initial_soc_range
        energy = rng.uniform(lo, hi, size=M) * c.battery_kwh if hi > lo else \
            np.full(M, lo * c.battery_kwh)
        trip = np.array([c.timetable.next_trip(m, 0) for m in range(M)], dtype=int)
        tau = np.array([max(self.departure(m, trip[m]) - 0 - 1, 0) for m in range(M)], dtype=int)
        pv_h, price_h = self._histories(day, 0)
        ones = np.ones(M, dtype=int)
        return self._make(energy=energy, status=ones, prev_status=ones.copy(), tau=tau,
                          prev_alloc=np.zeros(M, dtype=int), trip=trip,
                          pv_history=pv_h, price_history=price_h, t=0, day=day)

    def check_allocation(self, state: GlobalState, alloc: np.ndarray) -> np.ndarray:
        alloc = np.asarray(alloc, dtype=int)
        if alloc.shape != (self.M,) or np.any((alloc != 0) & (alloc != 1)):
            raise ContractViolation(f"allocation must be a 0/1 vector of length {self.M}")
        if alloc.sum() > self.config.charger_count:
            raise ContractViolation(
                f"allocation uses {alloc.sum()} chargers, only {self.config.charger_count} exist")
        if np.any(alloc * (1 - state.status)):
            raise ContractViolation("charger allocated to an operating EB")
        return alloc

    def power_ranges(self, state: GlobalState, alloc: np.ndarray):
        lo = np.empty(self.M)
        hi = np.empty(self.M)
        for m in range(self.M):
            lo[m], hi[m] = feasible_power_range(state.local(m), int(alloc[m]), self.config)
        return lo, hi

    def step(self, state: GlobalState, alloc, controlled_powers, rng: np.random.Generator) -> StepOutcome:
        """Advance one step.

        ``controlled_powers`` is a length-M array; only entries of allocated
        EBs are read. Operating EBs drain a uniform draw from the consumption
        band, waiting EBs idle.
        """
        c = self.config
        M = self.M
        if state.t >= self.T:
            raise ContractViolation("episode already finished")
        alloc = self.check_allocation(state, alloc)
        controlled_powers = np.asarray(controlled_powers, dtype=float)
        lo, hi = self.power_ranges(state, alloc)

        powers = np.zeros(M)
        band_lo, band_hi = c.consumption_band
        for m in range(M):
            if state.status[m] == 0:
                drain = rng.uniform(band_lo, band_hi) if band_hi > band_lo else band_lo
                powers[m] = min(max(-drain, lo[m]), 0.0)
            elif alloc[m]:
                p = float(controlled_powers[m])
                tol = 1e-9 * max(1.0, abs(lo[m]), abs(hi[m]))
                if not np.isfinite(p) or p < lo[m] - tol or p > hi[m] + tol:
                    raise ContractViolation(
                        f"EB {m}: power {p!r} outside feasible range [{lo[m]}, {hi[m]}]")
                powers[m] = min(max(p, lo[m]), hi[m])

        c_ch, c_bat, c_sw = operational_cost(state, alloc, powers, c)
        p_buy, p_sell = grid_split(station_load(powers, state.status, c), state.pv_history[-1])
        reward = -(c_ch + float(np.sum(c_bat)) + float(np.sum(c_sw)))
        c_safe = safety_cost(state, c)

        energy = np.clip(state.energy + powers * c.dt, 0.0, c.e_max)

        flips = rng.random(M)
        status = state.status.copy()
        tau = state.tau.copy()
        trip = state.trip.copy()
        t1 = state.t + 1
        for m in range(M):
            loc = state.local(m)
            if loc.status == 1:
                departs = loc.tau == 0 and loc.trip < self.deps[m].size
                if departs:
                    status[m] = 0
                    tau[m] = loc.tau + 1
                else:
                    tau[m] = max(self.departure(m, loc.trip) - t1 - 1, 0)
            else:
                xi = termination_prob(loc, self.pmf(self.departure(m, loc.trip)), c.hazard)
                if flips[m] < xi:
                    status[m] = 1
                    trip[m] = loc.trip + 1
                    # a late return departs on the next step
                    tau[m] = max(self.departure(m, trip[m]) - t1 - 1, 0)
                else:
                    tau[m] = loc.tau + 1

        pv_h, price_h = self._histories(state.day, t1)
        nxt = self._make(energy=energy, status=status, prev_status=state.status.copy(), tau=tau,
                         prev_alloc=alloc.copy(), trip=trip, pv_history=pv_h,
                         price_history=price_h, t=t1, day=state.day)
        forced = bool(np.any(state.status + status == 1))
        return StepOutcome(nxt, reward, c_safe, float(c_ch), c_bat, c_sw, p_buy, p_sell,
                           powers, forced)


# ---------------------------------------------------------------------- encoders
def global_dim(M: int, h: int) -> int:
    return 5 * M + 2 * (h + 1) + 1


def local_dim(M: int, h: int) -> int:
    return 5 + 2 * (h + 1) + 1 + 2 * M


def _shared(state: GlobalState, config: ScenarioConfig, T: int) -> np.ndarray:
    return np.concatenate([state.pv_history / config.pv_scale,
                           state.price_history / config.price_scale,
                           [state.t / T]])


def _per_eb(state: GlobalState, config: ScenarioConfig, T: int) -> np.ndarray:
    return np.stack([state.energy / config.battery_kwh, state.status, state.prev_status,
                     state.tau / T, state.prev_alloc], axis=1).astype(float)


def encode_global(state: GlobalState, config: ScenarioConfig) -> np.ndarray:
    T = config.T
    return np.concatenate([_per_eb(state, config, T).ravel(), _shared(state, config, T)])


def encode_local(state: GlobalState, m: int, alloc, config: ScenarioConfig) -> np.ndarray:
    T = config.T
    M = state.fleet_size
    onehot = np.zeros(M)
    onehot[m] = 1.0
    return np.concatenate([_per_eb(state, config, T)[m], _shared(state, config, T),
                           np.asarray(alloc, dtype=float), onehot])


def encode_locals(state: GlobalState, agents, alloc, config: ScenarioConfig) -> np.ndarray:
    """Stacked local encodings for several agents."""
    T = config.T
    M = state.fleet_size
    per = _per_eb(state, config, T)
    shared = _shared(state, config, T)
    alloc = np.asarray(alloc, dtype=float)
    rows = []
    for m in agents:
        onehot = np.zeros(M)
        onehot[m] = 1.0
        rows.append(np.concatenate([per[m], shared, alloc, onehot]))
    return np.array(rows).reshape(len(rows), local_dim(M, config.timebase.history_window))


# ---------------------------------------------------------------------- trace dump
TRACE_COLUMNS = ("t", "m", "E", "B", "tau", "omega", "p", "price", "pv", "P_buy", "P_sell",
                 "c_ch", "c_bat", "c_sw", "c_safe")


def trace_rows(state: GlobalState, alloc, outcome: StepOutcome):
    for m in range(state.fleet_size):
        yield (state.t, m, float(state.energy[m]), int(state.status[m]), int(state.tau[m]),
               int(alloc[m]), float(outcome.powers[m]), float(state.price_history[-1]),
               float(state.pv_history[-1]), outcome.p_buy, outcome.p_sell,
               outcome.charging_cost, float(outcome.degradation_cost[m]),
               float(outcome.switching_cost[m]), outcome.safety_cost)


def write_trace(path, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else int(v) for v in row])
