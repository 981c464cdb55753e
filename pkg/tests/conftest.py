import pytest

from minibox.engine import Engine


@pytest.fixture
def engine():
    """Fresh engine with the base image, host machine and every fixture image."""
    return Engine.with_fixtures()


@pytest.fixture
def bare():
    """Fresh engine with only the debian:wheezy base."""
    return Engine.with_fixtures(images=False)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
