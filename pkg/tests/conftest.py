import numpy as np
import pytest

from hasel3ps import SharedConstants, TABLE1_PARAMS
from hasel3ps.core import ActuatorState, SystemState

ACCEPTANCE_LINES: list[str] = []


def record(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def consts():
    return SharedConstants()


@pytest.fixture(scope="session")
def consts_g0():
    """Gravity-free constants, for which the de-energised rest is an equilibrium."""
    return SharedConstants(g_grav=0.0)


@pytest.fixture(scope="session")
def params():
    return TABLE1_PARAMS


def random_actuator(rng, consts, scale=1.0):
    """A feasible, unclamped actuator state near the operating region."""
    while True:
        th = rng.uniform(-0.1, 0.3) * scale
        lp = consts.L_p * (1.0 + rng.uniform(-0.05, 0.05) * scale)
        if consts.L_v / lp * np.cos(th / 2) < 1 - 1e-6:
            break
    return ActuatorState(th, lp, rng.normal() * 1e-6, rng.normal() * 2e-8, rng.normal() * 2e-8)


def random_state(rng, consts, scale=1.0):
    return SystemState(tuple(random_actuator(rng, consts, scale) for _ in range(3)))
