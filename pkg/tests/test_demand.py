import numpy as np
import pytest

from dvsl.errors import ConfigError
from dvsl.sim import DemandProfile, generate_demand, hourly_counts, schedule_checksum
from dvsl.sim.scenario import CLASS_TRUCK, ROUTES, Scenario, desk_scenario, paper_scenario


def profile(rate_by_route, hours=1, **kw):
    return DemandProfile(hourly_rates={r: [rate_by_route.get(r, 0.0)] * hours for r in ROUTES}, **kw)


def test_zero_rates_give_empty_schedule():
    assert len(generate_demand(profile({}, hours=18), seed=0)) == 0


def test_negative_rate_rejected():
    with pytest.raises(ConfigError):
        DemandProfile(hourly_rates={"main_main": [-1.0], "main_off": [0.0], "on_main": [0.0]})


def test_truck_share_close_to_configured_fraction():
    sched = generate_demand(profile({"main_main": 10_000.0}), seed=4)
    share = np.mean(sched["cls"] == CLASS_TRUCK)
    assert 0.13 <= share <= 0.17


def test_hour_zero_count_is_the_first_poisson_draw():
    p = profile({"main_main": 1800.0})
    sched = generate_demand(p, seed=2024)
    assert len(sched) == np.random.default_rng(2024).poisson(1800.0)


def test_poisson_mean_over_seeds():
    p = profile({"main_main": 1800.0})
    counts = [len(generate_demand(p, seed=s)) for s in range(1000)]
    assert abs(np.mean(counts) - 1800.0) < 50.0


def test_same_seed_same_schedule():
    sc = desk_scenario()
    a = generate_demand(sc.demand, seed=9)
    b = generate_demand(sc.demand, seed=9)
    c = generate_demand(sc.demand, seed=10)
    assert schedule_checksum(a) == schedule_checksum(b) != schedule_checksum(c)


def test_paper_schedule_spans_eighteen_hours():
    sc = paper_scenario()
    sched = generate_demand(sc.demand, seed=1)
    assert sc.demand.hours == 18
    assert sched["time"].min() >= 0.0 and sched["time"].max() < 64800.0
    assert np.all(np.diff(sched["time"]) >= 0)
    counts = hourly_counts(sched, 18)
    assert counts.shape == (18, 3)
    assert counts.sum() == len(sched)


def test_scenario_dict_round_trip():
    sc = paper_scenario(seed=3)
    again = Scenario.from_dict(sc.to_dict())
    assert again.to_dict() == sc.to_dict()
    with pytest.raises(ConfigError):
        Scenario.from_dict({"lanes": 4})
    with pytest.raises(ConfigError):
        Scenario.from_dict({"layout": {"controlled_length": -1}})
