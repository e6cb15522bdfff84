"""Scenario files: a versioned YAML schema, validation and built-in micro scenarios.

Layout (every section except ``timetable`` is optional)::

    schema_version: 1
    name: micro
    seed: 0
    timebase: {steps_per_day: 24, step_minutes: 60, history_window: 4}
    fleet: {size: 2, chargers: 1}
    battery: {capacity_kwh: 240, soc_min: 0.2, soc_max: 1.0,
              p_ch_max: 120, p_dis_max: 120, initial_soc_range: [0.6, 0.6]}
    costs: {sell_discount: 0.8, zeta_b: 0.1, zeta_s: 0.1, bk_slope: -100}
    consumption_band: [20, 40]
    traces:
      price: {synthetic: {days: 1, noise: 0.0, seed: 0}}   # or {csv: path} or {hourly: [...]}
      pv: {synthetic: {days: 1, noise: 0.0, seed: 0, peak: 42.92}}
      days: first                                            # or random
    timetable: {departures: [[6, 10, 15], [8, 13, 18]]}     # or {headway: {...}}
    travel: {peak_mean: 140, peak_sd: 24, offpeak_mean: 120, offpeak_sd: 22,
             peak_hours: [[7, 9], [17, 19]], min_steps: 1, max_steps: 4}
    model: {hazard: product, grid_scope: terminal}
    training: {iterations: 2000, ...}                        # TrainConfig fields
    oracle: {power_levels: [...], max_state_bins: 241, horizon: null}
    evaluation: {episodes: 200}

Relative CSV paths resolve against the config file's directory.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .baselines import OracleConfig
from .data import (ConfigError, PriceTrace, PvTrace, ScenarioConfig, Timebase, TravelTimeModel,
                   TYPICAL_PRICE_HOURLY, build_timetable, headway_departures, hourly_to_steps,
                   load_trace, typical_pv_hourly)
from .policy import NetworkSizes
from .trainer import TrainConfig

SCHEMA_VERSION = 1

_SECTIONS = {"schema_version", "name", "seed", "timebase", "fleet", "battery", "costs",
             "consumption_band", "traces", "timetable", "travel", "model", "training",
             "oracle", "evaluation"}
_KEYS = {
    "timebase": {"steps_per_day", "step_minutes", "history_window"},
    "fleet": {"size", "chargers"},
    "battery": {"capacity_kwh", "soc_min", "soc_max", "p_ch_max", "p_dis_max",
                "initial_soc_range"},
    "costs": {"sell_discount", "zeta_b", "zeta_s", "bk_slope"},
    "traces": {"price", "pv", "days"},
    "timetable": {"departures", "routes", "headway"},
    "travel": {"peak_mean", "peak_sd", "offpeak_mean", "offpeak_sd", "peak_hours",
               "min_steps", "max_steps"},
    "model": {"hazard", "grid_scope"},
    "oracle": {"power_levels", "max_state_bins", "horizon", "max_work"},
    "evaluation": {"episodes"},
}


class SchemaError(ConfigError):
    """Config file does not follow the schema; ``problems`` lists every issue."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class RunConfig:
    scenario: ScenarioConfig
    training: TrainConfig
    oracle: OracleConfig
    eval_episodes: int = 200
    raw: dict = field(default_factory=dict)


# ---------------------------------------------------------------------- parsing
def _section(raw, name, problems) -> dict:
    sec = raw.get(name, {}) or {}
    if not isinstance(sec, dict):
        problems.append(f"{name}: expected a mapping")
        return {}
    allowed = _KEYS.get(name)
    if allowed is not None:
        for k in sec:
            if k not in allowed:
                problems.append(f"{name}.{k}: unknown key (allowed: {', '.join(sorted(allowed))})")
    return sec


def _trace(spec, kind, timebase, base_dir, problems):
    where = f"traces.{kind}"
    if spec is None:
        spec = {"synthetic": {}}
    if not isinstance(spec, dict) or len(spec) != 1:
        problems.append(f"{where}: expected exactly one of csv, hourly, synthetic")
        return None
    (src, arg), = spec.items()
    try:
        if src == "csv":
            path = Path(arg)
            if not path.is_absolute():
                path = Path(base_dir) / path
            return load_trace(path, kind, timebase)
        if src == "hourly":
            values = hourly_to_steps(arg, timebase)
            return PriceTrace(values) if kind == "price" else PvTrace(values)
        if src == "synthetic":
            arg = arg or {}
            days = int(arg.get("days", 1))
            noise = float(arg.get("noise", 0.0))
            rng = np.random.default_rng(int(arg.get("seed", 0)))
            if kind == "price":
                base = np.asarray(TYPICAL_PRICE_HOURLY) * float(arg.get("scale", 1.0))
            else:
                base = typical_pv_hourly(float(arg.get("peak", 42.92)))
            rows = []
            for _ in range(days):
                if noise > 0:
                    row = base * rng.lognormal(0.0, noise) * np.clip(
                        1 + noise * rng.standard_normal(24), 0.0, None)
                else:
                    row = base.copy()
                rows.append(row)
            values = hourly_to_steps(np.concatenate(rows), timebase)
            return PriceTrace(values) if kind == "price" else PvTrace(values)
        problems.append(f"{where}: unknown source {src!r}")
    except (ConfigError, ValueError, OSError) as e:
        problems.append(f"{where}: {e}")
    return None


def parse_config(raw: dict, base_dir=".") -> RunConfig:
    """Build a :class:`RunConfig`; raises :class:`SchemaError` listing every problem."""
    problems = []
    if not isinstance(raw, dict):
        raise SchemaError(["top level: expected a mapping"])
    ver = raw.get("schema_version")
    if ver is None:
        problems.append("schema_version: missing")
    elif ver != SCHEMA_VERSION:
        problems.append(f"schema_version: unsupported version {ver!r} (expected {SCHEMA_VERSION})")
    for k in raw:
        if k not in _SECTIONS:
            problems.append(f"{k}: unknown section")

    tb_raw = _section(raw, "timebase", problems)
    try:
        tb = Timebase(**tb_raw)
    except (ConfigError, TypeError) as e:
        problems.append(f"timebase: {e}")
        raise SchemaError(problems)

    fleet = _section(raw, "fleet", problems)
    battery = _section(raw, "battery", problems)
    costs = _section(raw, "costs", problems)
    traces = _section(raw, "traces", problems)
    tt_raw = _section(raw, "timetable", problems)
    travel_raw = dict(_section(raw, "travel", problems))
    model = _section(raw, "model", problems)
    oracle_raw = _section(raw, "oracle", problems)
    evaluation = _section(raw, "evaluation", problems)
    try:
        M = int(fleet.get("size", 2))
        N = int(fleet.get("chargers", 1))
    except (TypeError, ValueError):
        problems.append("fleet: size and chargers must be integers")
        raise SchemaError(problems)

    price = _trace(traces.get("price"), "price", tb, base_dir, problems)
    pv = _trace(traces.get("pv"), "pv", tb, base_dir, problems)

    timetable = None
    try:
        if "headway" in tt_raw:
            deps, routes = headway_departures(M, **tt_raw["headway"])
            timetable = build_timetable(deps, tb.steps_per_day, routes)
        elif "departures" in tt_raw:
            timetable = build_timetable(tt_raw["departures"], tb.steps_per_day,
                                        tt_raw.get("routes"))
        else:
            problems.append("timetable: need departures or headway")
    except (ConfigError, TypeError) as e:
        problems.append(f"timetable: {e}")

    travel = None
    try:
        peak_hours = travel_raw.pop("peak_hours", ((7, 9), (17, 19)))
        travel = TravelTimeModel.from_hours(tb, tuple(tuple(p) for p in peak_hours), **travel_raw)
    except (ConfigError, TypeError) as e:
        problems.append(f"travel: {e}")

    scenario = None
    if not problems:
        kw = dict(timebase=tb, fleet_size=M, charger_count=N,
                  price=price, pv=pv, timetable=timetable, travel=travel,
                  name=str(raw.get("name", "scenario")), seed=int(raw.get("seed", 0)),
                  trace_days=traces.get("days", "first"))
        rename = {"capacity_kwh": "battery_kwh"}
        for k, v in battery.items():
            kw[rename.get(k, k)] = tuple(v) if isinstance(v, list) else v
        kw.update(costs)
        kw.update(model)
        if "consumption_band" in raw:
            kw["consumption_band"] = tuple(raw["consumption_band"])
        try:
            scenario = ScenarioConfig(**kw)
        except (ConfigError, TypeError) as e:
            problems.append(f"scenario: {e}")

    training = TrainConfig()
    tr_raw = dict(raw.get("training", {}) or {})
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    for k in list(tr_raw):
        if k not in names:
            problems.append(f"training.{k}: unknown key")
            tr_raw.pop(k)
    if "sizes" in tr_raw:
        try:
            tr_raw["sizes"] = NetworkSizes(**{k: tuple(v) for k, v in tr_raw["sizes"].items()})
        except (TypeError, AttributeError) as e:
            problems.append(f"training.sizes: {e}")
            tr_raw.pop("sizes")
    for k in ("value_scale",):
        if k in tr_raw:
            tr_raw[k] = tuple(tr_raw[k])
    tr_raw.setdefault("seed", int(raw.get("seed", 0)))
    try:
        training = TrainConfig(**tr_raw)
    except (ValueError, TypeError) as e:
        problems.append(f"training: {e}")

    oracle = OracleConfig()
    try:
        if "power_levels" in oracle_raw:
            oracle_raw = dict(oracle_raw, power_levels=tuple(float(p) for p in oracle_raw["power_levels"]))
        oracle = OracleConfig(**oracle_raw)
        if scenario is not None:
            oracle.check(scenario)
    except (ValueError, TypeError) as e:
        problems.append(f"oracle: {e}")

    episodes = evaluation.get("episodes", 200)
    if not isinstance(episodes, int) or episodes < 1:
        problems.append("evaluation.episodes: must be a positive integer")
    if problems:
        raise SchemaError(problems)
    return RunConfig(scenario, training, oracle, int(episodes), raw)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise SchemaError([f"{path}: not valid YAML ({e})"])
    except OSError as e:
        raise SchemaError([f"{path}: {e.strerror}"])
    return parse_config(raw, path.parent)


def validate_config(path) -> list[str]:
    """Every schema problem in the file; empty when valid."""
    try:
        load_config(path)
    except SchemaError as e:
        return e.problems
    return []


def dump_config(raw: dict, path):
    Path(path).write_text(yaml.safe_dump(raw, sort_keys=False))


# ---------------------------------------------------------------------- built-in scenarios
MICRO_LEVELS = tuple(float(p) for p in range(-120, 121, 20))


def micro_raw(stochastic_traces: bool = False, seed: int = 0, steps_per_day: int = 24) -> dict:
    """The 2-EB, 1-charger day used by the smoke and ordering checks."""
    step = 1440 // steps_per_day

    def at(hour):
        return hour * steps_per_day // 24

    syn = {"days": 7 if stochastic_traces else 1, "noise": 0.15 if stochastic_traces else 0.0,
           "seed": seed}
    return {
        "schema_version": SCHEMA_VERSION,
        "name": "micro-stochastic" if stochastic_traces else "micro",
        "seed": seed,
        "timebase": {"steps_per_day": steps_per_day, "step_minutes": step, "history_window": 4},
        "fleet": {"size": 2, "chargers": 1},
        "battery": {"initial_soc_range": [0.6, 0.6]},
        "traces": {"price": {"synthetic": dict(syn)},
                   "pv": {"synthetic": dict(syn, seed=seed + 1)},
                   "days": "random" if stochastic_traces else "first"},
        "timetable": {"departures": [[at(6), at(10), at(15)], [at(8), at(13), at(18)]]},
        "consumption_band": [30.0, 30.0],
        # truncated at roughly mean + 3 sd
        "travel": {"peak_mean": 140, "peak_sd": 24, "offpeak_mean": 120, "offpeak_sd": 22,
                   "max_steps": max(2, at(4))},
        "oracle": {"power_levels": list(MICRO_LEVELS)},
        "training": {"iterations": 2000, "value_scale": [5.0, 20.0], "lr_actor": 1e-3,
                     "lr_termination": 1e-3, "lr_low": 1e-3, "batch_size": 64,
                     "init_log_std": math.log(0.25), "lr_anneal": True},
        "evaluation": {"episodes": 200},
    }


def micro_config(stochastic_traces: bool = False, seed: int = 0, steps_per_day: int = 24,
                 **training) -> RunConfig:
    raw = micro_raw(stochastic_traces, seed, steps_per_day)
    raw["training"].update(training)
    return parse_config(raw)
