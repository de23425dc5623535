import pytest

from mixedcap.capacity import RoadParams

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns the outcome."""
    lines = request.config.stash[VERDICTS]

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


@pytest.fixture
def params():
    # reference road: L=4, h=30, h_bar=11, d=1000
    return RoadParams(4.0, 30.0, 11.0, 1000.0, 2)
