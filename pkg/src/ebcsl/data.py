"""Traces, timebase, travel-time models and timetables.

Everything here is immutable once built and safe to share between
rollout workers.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
from scipy.stats import norm

MINUTES_PER_DAY = 1440


class ConfigError(ValueError):
    """Invalid scenario or model configuration."""


class TraceError(ValueError):
    """Malformed or incomplete trace file."""


@dataclass(frozen=True)
class Timebase:
    steps_per_day: int = 144
    step_minutes: int = 10
    history_window: int = 4

    def __post_init__(self):
        if self.steps_per_day * self.step_minutes != MINUTES_PER_DAY:
            raise ConfigError(
                f"steps_per_day * step_minutes must be {MINUTES_PER_DAY}, got "
                f"{self.steps_per_day} * {self.step_minutes}")
        if self.history_window < 1:
            raise ConfigError("history_window must be >= 1")

    @property
    def dt_hours(self) -> float:
        return self.step_minutes / 60.0

    def step_of(self, hour: float) -> int:
        return int(round(hour * 60 / self.step_minutes))


@dataclass(frozen=True, eq=False)
class PriceTrace:
    """Per-step grid price ($/kWh); may span several days."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise TraceError("price trace must be a non-empty 1-D array")
        if not np.all(np.isfinite(v)):
            raise TraceError("price trace contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def num_days(self, timebase: Timebase) -> int:
        return self.values.size // timebase.steps_per_day

    def day(self, d: int, timebase: Timebase) -> np.ndarray:
        T = timebase.steps_per_day
        return self.values[d * T:(d + 1) * T]


@dataclass(frozen=True, eq=False)
class PvTrace:
    """Per-step PV output (kW)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise TraceError("pv trace must be a non-empty 1-D array")
        if not np.all(np.isfinite(v)):
            raise TraceError("pv trace contains non-finite values")
        if np.any(v < 0):
            raise TraceError("pv trace contains negative power")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    num_days = PriceTrace.num_days
    day = PriceTrace.day


def load_trace(path, kind: str, timebase: Timebase):
    """Read a ``timestamp,value`` CSV and hold each value over the step grid.

    Rows may be hourly or finer but must be evenly spaced and cover whole
    days starting at midnight.
    """
    if kind not in ("price", "pv"):
        raise ValueError(f"kind must be 'price' or 'pv', not {kind!r}")
    path = Path(path)
    stamps, values = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "value"]:
            raise TraceError(f"{path}:1: expected header 'timestamp,value'")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise TraceError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                ts = datetime.fromisoformat(row[0].strip())
                val = float(row[1])
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from None
            if not math.isfinite(val):
                raise TraceError(f"{path}:{lineno}: non-finite value")
            if kind == "pv" and val < 0:
                raise TraceError(f"{path}:{lineno}: negative PV power {val}")
            stamps.append(ts)
            values.append(val)
    if not stamps:
        raise TraceError(f"{path}: no data rows")

    start = stamps[0]
    if (start.hour, start.minute, start.second) != (0, 0, 0):
        raise TraceError(f"{path}:2: trace must start at midnight, got {start.isoformat()}")
    gaps = [b - a for a, b in zip(stamps, stamps[1:])]
    res = min(gaps) if gaps else timedelta(hours=1)
    if res <= timedelta(0):
        raise TraceError(f"{path}: timestamps must be strictly increasing")
    if res > timedelta(hours=1):
        raise TraceError(f"{path}: resolution coarser than hourly ({res})")
    for i, g in enumerate(gaps):
        if g != res:
            raise TraceError(
                f"{path}:{i + 3}: missing interval between "
                f"{stamps[i].isoformat()} and {stamps[i + 1].isoformat()}")
    end = stamps[-1] + res
    span = end - start
    if span.total_seconds() % 86400:
        raise TraceError(f"{path}: trace does not cover whole days (ends {end.isoformat()})")

    num_days = int(span.total_seconds() // 86400)
    T = timebase.steps_per_day
    step = timedelta(minutes=timebase.step_minutes)
    res_s = res.total_seconds()
    out = np.empty(num_days * T)
    for i in range(out.size):
        offset = (i * step).total_seconds()
        out[i] = values[int(offset // res_s)]
    return PriceTrace(out) if kind == "price" else PvTrace(out)


def write_trace(path, values, timebase: Timebase, start: datetime = datetime(2023, 1, 1)):
    """Inverse of :func:`load_trace` at step resolution."""
    step = timedelta(minutes=timebase.step_minutes)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "value"])
        for i, v in enumerate(values):
            w.writerow([(start + i * step).isoformat(), repr(float(v))])


def hourly_to_steps(hourly, timebase: Timebase) -> np.ndarray:
    """Piecewise-constant hold of 24*k hourly values onto the step grid.

    Steps longer than an hour take the mean of the hours they cover.
    """
    hourly = np.asarray(hourly, dtype=float)
    if hourly.size % 24:
        raise ConfigError("hourly profile length must be a multiple of 24")
    dt = timebase.step_minutes
    if dt <= 60:
        if 60 % dt:
            raise ConfigError("step_minutes must divide 60 for hourly profiles")
        return np.repeat(hourly, 60 // dt)
    if dt % 60:
        raise ConfigError("step_minutes above 60 must be a whole number of hours")
    return hourly.reshape(-1, dt // 60).mean(axis=1)


# Typical-day shapes; the evening peak and PV peak follow the MISO and
# microgrid days used in the experiments (0.03921 $/kWh at 17:00, 42.92 kW at 13:00).
TYPICAL_PRICE_HOURLY = (
    0.0195, 0.0183, 0.0176, 0.0172, 0.0178, 0.0197, 0.0236, 0.0281,
    0.0297, 0.0272, 0.0251, 0.0240, 0.0232, 0.0229, 0.0238, 0.0265,
    0.0318, 0.03921, 0.0362, 0.0314, 0.0276, 0.0247, 0.0222, 0.0204,
)


def typical_pv_hourly(peak: float = 42.92) -> np.ndarray:
    h = np.arange(24, dtype=float)
    shape = np.clip(np.sin(np.pi * (h - 7.0) / 12.0), 0.0, None) ** 1.5
    shape[(h < 8) | (h > 18)] *= 0.05
    return peak * shape


def synthetic_traces(timebase: Timebase, num_days: int = 1, noise: float = 0.0,
                     seed: int = 0, pv_peak: float = 42.92):
    """Seeded price and PV traces built around the typical-day shapes.

    ``noise`` is the relative standard deviation of a per-day level factor
    and of per-hour jitter; ``noise=0`` repeats the typical day exactly.
    """
    rng = np.random.default_rng(seed)
    base_p = np.asarray(TYPICAL_PRICE_HOURLY)
    base_pv = typical_pv_hourly(pv_peak)
    prices, pvs = [], []
    for _ in range(num_days):
        if noise > 0:
            lvl = rng.lognormal(0.0, noise)
            p = base_p * lvl * (1 + noise * rng.standard_normal(24))
            pv = base_pv * rng.uniform(max(0.0, 1 - 2 * noise), 1.0) \
                * np.clip(1 + noise * rng.standard_normal(24), 0.0, None)
        else:
            p, pv = base_p.copy(), base_pv.copy()
        prices.append(p)
        pvs.append(pv)
    price = PriceTrace(hourly_to_steps(np.concatenate(prices), timebase))
    pv = PvTrace(hourly_to_steps(np.concatenate(pvs), timebase))
    return price, pv


@dataclass(frozen=True)
class TravelTimeModel:
    """Two-regime normal travel time (minutes), discretized to whole steps."""

    step_minutes: int = 10
    peak_mean: float = 50.0
    peak_sd: float = 8.0
    offpeak_mean: float = 40.0
    offpeak_sd: float = 8.0
    peak_windows: tuple = ()   # ((start_step, end_step), ...) half-open
    min_steps: int = 1
    max_steps: int = 12

    def __post_init__(self):
        if self.min_steps < 1:
            raise ConfigError("min_steps must be >= 1")
        if self.max_steps < self.min_steps:
            raise ConfigError("max_steps must be >= min_steps")
        if min(self.peak_sd, self.offpeak_sd) < 0:
            raise ConfigError("travel-time standard deviations must be >= 0")
        object.__setattr__(self, "peak_windows",
                           tuple((int(a), int(b)) for a, b in self.peak_windows))

    @classmethod
    def from_hours(cls, timebase: Timebase, peak_hours=((7, 9), (17, 19)), **kw):
        windows = tuple((timebase.step_of(a), timebase.step_of(b)) for a, b in peak_hours)
        return cls(step_minutes=timebase.step_minutes, peak_windows=windows, **kw)

    def is_peak(self, departure_step: int) -> bool:
        return any(a <= departure_step < b for a, b in self.peak_windows)

    def params(self, departure_step: int):
        if self.is_peak(departure_step):
            return self.peak_mean, self.peak_sd
        return self.offpeak_mean, self.offpeak_sd

    def mean_steps(self, departure_step: int) -> int:
        """Modal step count, used as the deterministic travel estimate."""
        return int(np.argmax(travel_pmf(self, departure_step)))


def travel_pmf(model: TravelTimeModel, departure_step: int) -> np.ndarray:
    """Probability of each operating duration, indexed by step count.

    Normal mass is binned to the nearest whole step, i.e. step k collects
    minutes in ((k - 1/2) dt, (k + 1/2) dt], then truncated to
    [min_steps, max_steps] and renormalized.
    """
    mean, sd = model.params(departure_step)
    dt = model.step_minutes
    k = np.arange(model.max_steps + 1, dtype=float)
    if sd == 0:
        mass = np.zeros_like(k)
        j = int(np.floor(mean / dt + 0.5))
        if model.min_steps <= j <= model.max_steps:
            mass[j] = 1.0
    else:
        hi = norm.cdf(((k + 0.5) * dt - mean) / sd)
        lo = norm.cdf(((k - 0.5) * dt - mean) / sd)
        mass = hi - lo
        mass[:model.min_steps] = 0.0
    total = mass.sum()
    if total <= 0:
        raise ConfigError(
            f"travel-time pmf has no mass in [{model.min_steps}, {model.max_steps}] "
            f"steps for departure step {departure_step}")
    return mass / total


def sample_travel_steps(model: TravelTimeModel, departure_step: int,
                        rng: np.random.Generator) -> int:
    pmf = travel_pmf(model, departure_step)
    return int(rng.choice(pmf.size, p=pmf))


@dataclass(frozen=True)
class TripSpec:
    trip_id: int
    route_id: int
    departure_step: int


@dataclass(frozen=True)
class Timetable:
    """Per-EB trip rotations, each ordered by departure."""

    rotations: tuple   # tuple[tuple[TripSpec, ...], ...]

    @property
    def fleet_size(self) -> int:
        return len(self.rotations)

    def departures(self, m: int) -> list[int]:
        return [trip.departure_step for trip in self.rotations[m]]

    def next_trip(self, m: int, t: int) -> int:
        """Index of the first trip of EB ``m`` departing at or after ``t``.

        Returns ``len(rotation)`` when no trips remain that day.
        """
        for i, trip in enumerate(self.rotations[m]):
            if trip.departure_step >= t:
                return i
        return len(self.rotations[m])


def build_timetable(departures, steps_per_day: int, routes=None) -> Timetable:
    """Validate explicit per-EB departure lists into a :class:`Timetable`."""
    rotations = []
    trip_id = 0
    for m, deps in enumerate(departures):
        deps = [int(d) for d in deps]
        if not deps:
            raise ConfigError(f"EB {m} has no trips")
        for a, b in zip(deps, deps[1:]):
            if b <= a:
                raise ConfigError(
                    f"EB {m}: departures must be strictly increasing ({a} then {b})")
        if deps[0] < 0 or deps[-1] >= steps_per_day:
            raise ConfigError(f"EB {m}: departure outside [0, {steps_per_day})")
        route = 0 if routes is None else int(routes[m])
        trips = []
        for d in deps:
            trips.append(TripSpec(trip_id, route, d))
            trip_id += 1
        rotations.append(tuple(trips))
    return Timetable(tuple(rotations))


def headway_departures(fleet_size: int, first_step: int, last_step: int,
                       headway_steps: int, num_routes: int = 2, route_offset: int = 0):
    """Departures for ``num_routes`` loop lines served round-robin.

    EBs are split evenly across routes; each route departs every
    ``headway_steps`` and its EBs take turns, so one EB departs every
    ``headway_steps * buses_on_route`` steps.
    Returns ``(departures, routes)`` suitable for :func:`build_timetable`.
    """
    if headway_steps < 1:
        raise ConfigError("headway_steps must be >= 1")
    departures = [[] for _ in range(fleet_size)]
    routes = [m % num_routes for m in range(fleet_size)]
    for r in range(num_routes):
        buses = [m for m in range(fleet_size) if routes[m] == r]
        if not buses:
            continue
        start = first_step + r * route_offset
        for i, dep in enumerate(range(start, last_step + 1, headway_steps)):
            departures[buses[i % len(buses)]].append(dep)
    return departures, routes


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """Everything needed to instantiate the simulator."""

    timebase: Timebase
    fleet_size: int
    charger_count: int
    price: PriceTrace
    pv: PvTrace
    timetable: Timetable
    travel: TravelTimeModel
    battery_kwh: float = 240.0
    soc_min: float = 0.2
    soc_max: float = 1.0
    p_ch_max: float = 120.0
    p_dis_max: float = 120.0
    sell_discount: float = 0.8
    zeta_b: float = 0.1
    zeta_s: float = 0.1
    bk_slope: float = -100.0
    consumption_band: tuple = (20.0, 40.0)
    initial_soc_range: tuple = (0.5, 0.9)
    seed: int = 0
    # "product": hazard with the product denominator; "exact": true survival function
    hazard: str = "product"
    # "terminal": only EBs at the station enter the power balance; "all": every EB
    grid_scope: str = "terminal"
    # "first": every episode replays day 0; "random": each episode draws a day
    trace_days: str = "first"
    price_scale: float = 0.04
    pv_scale: float = 50.0
    name: str = "scenario"
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        problems = []
        if self.fleet_size < 1:
            problems.append("fleet_size must be >= 1")
        if not (0 <= self.charger_count < self.fleet_size):
            problems.append("charger_count N must satisfy 0 <= N < M")
        if not (0 <= self.soc_min < self.soc_max <= 1):
            problems.append("need 0 <= soc_min < soc_max <= 1")
        if not (0 < self.sell_discount < 1):
            problems.append("sell_discount must lie in (0, 1)")
        if self.p_ch_max <= 0 or self.p_dis_max <= 0:
            problems.append("p_ch_max and p_dis_max must be positive")
        if self.battery_kwh <= 0:
            problems.append("battery_kwh must be positive")
        lo, hi = self.consumption_band
        if not (0 <= lo <= hi):
            problems.append("consumption_band must satisfy 0 <= lo <= hi")
        a, b = self.initial_soc_range
        if not (0 <= a <= b <= self.soc_max):
            problems.append("initial_soc_range must lie within [0, soc_max]")
        if self.timetable.fleet_size != self.fleet_size:
            problems.append(
                f"timetable has {self.timetable.fleet_size} rotations for {self.fleet_size} EBs")
        T = self.timebase.steps_per_day
        for name, tr in (("price", self.price), ("pv", self.pv)):
            if tr.values.size % T:
                problems.append(f"{name} trace length {tr.values.size} is not a multiple of T={T}")
        if self.price.values.size != self.pv.values.size:
            problems.append("price and pv traces must span the same number of days")
        if self.travel.step_minutes != self.timebase.step_minutes:
            problems.append("travel model step_minutes differs from timebase")
        if self.hazard not in ("product", "exact"):
            problems.append("hazard must be 'product' or 'exact'")
        if self.grid_scope not in ("terminal", "all"):
            problems.append("grid_scope must be 'terminal' or 'all'")
        if self.trace_days not in ("first", "random"):
            problems.append("trace_days must be 'first' or 'random'")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def dt(self) -> float:
        return self.timebase.dt_hours

    @property
    def T(self) -> int:
        return self.timebase.steps_per_day

    @property
    def e_min(self) -> float:
        return self.soc_min * self.battery_kwh

    @property
    def e_max(self) -> float:
        return self.soc_max * self.battery_kwh

    @property
    def num_days(self) -> int:
        return self.price.num_days(self.timebase)

    def replace(self, **changes) -> "ScenarioConfig":
        import dataclasses
        return dataclasses.replace(self, **changes)
