import pytest

from floodtwin.scenario import build_datacube, build_scenario_set
from floodtwin.synthetic import valley_setup


@pytest.fixture(scope="session")
def small_valley():
    """Narrow valley small enough to simulate many times per session."""
    return valley_setup(nrows=11, ncols=30, cellsize=20.0, duration=2700.0)


@pytest.fixture(scope="session")
def small_cube(small_valley):
    s = small_valley
    scenarios = build_scenario_set(s.base_event, s.rating, s.anchor, anchor_peaks=[20.0, 40.0, 60.0, 80.0, 100.0, 120.0])
    return build_datacube(scenarios, s.domain, s.inflow_locations, s.outlets, s.gauges, s.duration)


_CRITERIA: list = []


@pytest.fixture
def criterion():
    """Record one acceptance line; ``check(name, ok, detail)`` prints it and returns ``ok``."""
    def check(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        _CRITERIA.append(line)
        print(line)
        return ok
    return check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
