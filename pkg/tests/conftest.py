import numpy as np
import pytest
from hypothesis import settings

from longmri.phantom import PhantomSpec, generate_phantom

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(scope="session")
def phantom():
    """Default 64^3 phantom (sigma 100) and its ground truth."""
    return generate_phantom(PhantomSpec())


@pytest.fixture(scope="session")
def clean_phantom():
    return generate_phantom(PhantomSpec(sigma=0.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, title: str, passed: bool, detail: str):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {title} | {detail}"
        lines.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
