import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("pacle", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("pacle")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def tiny_mdp(noise="gaussian"):
    """Two stages, two states at stage 1, two actions, d = 2."""
    from pacle.mdp import TabularLinearMdp
    f0 = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    f1 = np.array([[[0.6, 0.0], [0.0, 0.6]], [[0.5, 0.5], [0.3, -0.4]]])
    P0 = np.array([[[0.7, 0.3], [0.2, 0.8]]])
    r0 = np.array([[0.1, -0.2]])
    r1 = np.array([[0.3, 0.0], [-0.5, 0.2]])
    mask = (np.ones((1, 2), bool), np.ones((2, 2), bool))
    return TabularLinearMdp((f0, f1), (P0,), (r0, r1), mask, reward_noise=noise)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: dict[str, str] = {}


def record_criterion(name, passed, detail):
    ACCEPTANCE_LINES[name] = f"{name} {'PASS' if passed else 'FAIL'}: {detail}"
    print(ACCEPTANCE_LINES[name])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for name in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[name])
