import numpy as np
import pytest

from qacirc.model import build_fixture
from qacirc.probe import ProbeConfig, generate


@pytest.fixture(scope="session")
def fixture_model():
    return build_fixture()


@pytest.fixture(scope="session")
def weights(fixture_model):
    return fixture_model[1]


@pytest.fixture(scope="session")
def table(fixture_model):
    return fixture_model[2]


@pytest.fixture(scope="session")
def probe(fixture_model):
    _, w, table = fixture_model
    return generate(ProbeConfig(n=200), 7, table, w)[0]


@pytest.fixture(scope="session")
def small_probe(probe):
    return probe[:24]


@pytest.fixture(scope="session")
def split_probe(fixture_model):
    """Disjoint extraction / held-out halves drawn without replacement."""
    _, w, table = fixture_model
    data = generate(ProbeConfig(n=400), 11, table, w)[0]
    return data[:200], data[200:]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
