from importlib import resources

import numpy as np
import pytest

from reserve_option.config import load
from reserve_option.model import CostModel, ExtractionPlan, MarketModel, TechnicalModel

SCENARIO_FILE = resources.files("reserve_option") / "data" / "reserve_scenarios.cfg"

# one line per acceptance check, repeated at the end of the run
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def runfile():
    return load(SCENARIO_FILE)


@pytest.fixture(scope="session")
def scenarios(runfile):
    return {sc.name: sc for sc in runfile.scenarios}


@pytest.fixture(scope="session")
def calibrations(scenarios):
    return {name: sc.calibrate() for name, sc in scenarios.items()}


@pytest.fixture
def market():
    return MarketModel(kappa=0.5, theta=np.log(100.0), sigma=0.5, rho=0.05)


@pytest.fixture
def plan():
    return ExtractionPlan(alpha=1.0, beta=0.05, gamma=0.9, epsilon=2.0)


@pytest.fixture
def costs():
    return CostModel(1e8, 3e6)


def three_state(rate=1.0, a=1.0, b=0.5, volumes=(4.0, 10.0, 16.0)):
    A = rate * np.array([[-1.0, 1.0, 0.0], [1.0, -2.0, 1.0], [0.0, 1.0, -1.0]])
    return TechnicalModel(np.array(volumes), A, a, b)


def single_state(volume=10.0):
    return TechnicalModel(np.array([volume]), np.zeros((1, 1)), 1.0, 0.0)
