import numpy as np
import pytest

from pvfeeder.network import Bus, BusKind, FeederSpec, Line, NetworkModel, desk_feeder, generate_synthetic_feeder


def chain(n_lines: int, r: float = 0.6, x: float = 0.1, base_voltage: float = 230.0, base_power: float = 1000.0):
    buses = [Bus(0, BusKind.SLACK, False)] + [Bus(k) for k in range(1, n_lines + 1)]
    lines = [Line(k, k + 1, r, x) for k in range(n_lines)]
    return NetworkModel(buses, lines, base_voltage, base_power)


def random_radial(n: int, rng: np.random.Generator) -> NetworkModel:
    """Random tree: each new bus hangs off a uniformly chosen earlier bus."""
    buses = [Bus(0, BusKind.SLACK, False)] + [Bus(k) for k in range(1, n)]
    lines = []
    for k in range(1, n):
        r = rng.uniform(0.005, 0.05)
        lines.append(Line(int(rng.integers(0, k)), k, r, r / rng.uniform(2.0, 8.0)))
    return NetworkModel(buses, lines)


@pytest.fixture(scope="session")
def desk():
    return desk_feeder()


@pytest.fixture(scope="session")
def six_bus():
    return generate_synthetic_feeder(FeederSpec(6, seed=3, n_laterals=1))


# acceptance reporting: one line per criterion in the terminal summary
_CRITERIA = {}
_DETAILS = {}


def note(number: int, text: str) -> None:
    """Attach a measured value to an acceptance criterion's summary line."""
    _DETAILS.setdefault(number, []).append(text)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or rep.failed:
        prev = _CRITERIA.get(number, (title, True))
        _CRITERIA[number] = (title, prev[1] and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        detail = "; ".join(_DETAILS.get(number, []))
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else ""))
