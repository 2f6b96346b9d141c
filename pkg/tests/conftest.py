import numpy as np
import pytest
from hypothesis import settings

from chaincontrol.chain import toda

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def pot():
    return toda()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_states(n, count, seed=0, scale=1.0):
    """Gaussian states as columns of a (2n, count) array."""
    return scale * np.random.default_rng(seed).standard_normal((2 * n, count))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line, then assert."""

    def check(tag, ok, detail):
        line = f"{tag} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
