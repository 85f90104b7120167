import numpy as np
import pytest

from dvsl.sim import DemandProfile, Scenario, World
from dvsl.sim.scenario import ROUTES, DriverParams, NetworkLayout


def zero_demand(hours=1):
    return DemandProfile(hourly_rates={r: [0.0] * hours for r in ROUTES})


def quiet_scenario(hours=1, n_lanes=5, **kw):
    """A scenario with no random arrivals, for scripted vehicles."""
    layout = kw.pop("layout", NetworkLayout(n_main_lanes=n_lanes))
    return Scenario(layout=layout, demand=zero_demand(hours), **kw)


def light_scenario(rates=(1500, 200, 300), hours=1, tail=0, seed=0, **kw):
    """Uniform demand for ``hours`` hours followed by ``tail`` empty hours."""
    hourly = {r: [float(v)] * hours + [0.0] * tail for r, v in zip(ROUTES, rates)}
    return Scenario(demand=DemandProfile(hourly_rates=hourly, seed=seed), **kw)


@pytest.fixture
def quiet_world():
    return World(quiet_scenario())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def braking_world(decel):
    """Vehicle at 30 m/s in the controlled section that wants to stop, braking at ``decel``."""
    sc = quiet_scenario(driver=DriverParams(max_decel=decel))
    w = World(sc)
    w.set_limits([33.679] * 5)
    x = sc.layout.controlled_start + 100.0
    w.add_vehicle(lane=2, position=x, speed=30.0, desired_speed=0.0)
    return w


# ---------------------------------------------------------------------- acceptance summary
_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and rep.passed
    if rep.when == "call":
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        line = f"criterion {n}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        terminalreporter.write_line(line)
        for d in e["details"]:
            terminalreporter.write_line(f"    {d}")
