import numpy as np
import pytest

from causalwatch import synth
from causalwatch.dataset import PreprocessConfig
from causalwatch.discovery import DiscoveryConfig, discover

TOY_T = 2000
TOY_SEED = 42


@pytest.fixture(scope="session")
def toy_spec():
    return synth.toy_var(TOY_SEED)


@pytest.fixture(scope="session")
def toy(toy_spec):
    """The canonical toy VAR(2) recording shared by the derived checks."""
    return synth.generate_var(toy_spec, TOY_T)


@pytest.fixture(scope="session")
def toy_model(toy):
    return discover(toy, PreprocessConfig(t_s=1, tau_max=3),
                    DiscoveryConfig(alpha=0.01, prune=False))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line, then assert it."""
    def record(cid, ok, detail, status=None):
        ACCEPTANCE_LINES.append(f"[{status or ('PASS' if ok else 'FAIL')}] {cid}: {detail}")
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
