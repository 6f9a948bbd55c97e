import numpy as np
import pytest

from mtslstm.synth import generate_fleet


@pytest.fixture(scope="session")
def small_fleet():
    """Three basins, four years of hourly data starting 2000-10-01."""
    return generate_fleet(3, 11, years=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``; the summary prints them in order."""
    lines = request.config.stash.setdefault(CRITERIA_KEY, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(CRITERIA_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
