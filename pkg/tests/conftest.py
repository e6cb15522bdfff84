import numpy as np
import pytest

from ebcsl.data import (PriceTrace, PvTrace, ScenarioConfig, Timebase, TravelTimeModel,
                        build_timetable, synthetic_traces)


def small_scenario(**kw) -> ScenarioConfig:
    """2 EBs, 1 charger, hourly steps; cheap to simulate."""
    tb = Timebase(24, 60, 4)
    price, pv = synthetic_traces(tb)
    base = dict(
        timebase=tb, fleet_size=2, charger_count=1, price=price, pv=pv,
        timetable=build_timetable([[6, 10, 15], [8, 13, 18]], 24),
        travel=TravelTimeModel.from_hours(tb, peak_mean=140, peak_sd=24, offpeak_mean=120,
                                          offpeak_sd=22, max_steps=6),
        initial_soc_range=(0.5, 0.9))
    base.update(kw)
    return ScenarioConfig(**base)


def full_day_scenario(M=4, N=2, **kw) -> ScenarioConfig:
    """10-minute steps with the default travel model."""
    tb = Timebase()
    price, pv = synthetic_traces(tb, num_days=2, noise=0.1, seed=3)
    gap = min(9, 33 // M)
    deps = [[30 + gap * m, 70 + gap * m, 110 + gap * m] for m in range(M)]
    base = dict(timebase=tb, fleet_size=M, charger_count=N, price=price, pv=pv,
                timetable=build_timetable(deps, 144),
                travel=TravelTimeModel.from_hours(tb), trace_days="random")
    base.update(kw)
    return ScenarioConfig(**base)


@pytest.fixture
def scenario():
    return small_scenario()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


def record_criterion(n, ok, detail):
    _CRITERIA[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
