import pytest

from bgfinder.catalog import load_catalog
from bgfinder.decays import load_signals, parse_decay
from bgfinder.environment import Environment
from bgfinder.oracle import all_catalog_trees

RESULTS: list[str] = []


@pytest.fixture(scope="session")
def cat():
    return load_catalog()


@pytest.fixture(scope="session")
def signals(cat):
    return load_signals(cat)


@pytest.fixture(scope="session")
def all_signals(signals):
    return signals["train"] + signals["gen"]


@pytest.fixture(scope="session")
def trees(cat):
    return all_catalog_trees(cat)


@pytest.fixture
def env(cat):
    return Environment(cat)


@pytest.fixture(scope="session")
def dec(cat):
    return lambda text: parse_decay(text, cat)


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
