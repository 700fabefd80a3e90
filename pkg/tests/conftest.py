import os

import numpy as np
import pytest

from spinorbit.integrators import build_system
from spinorbit.model import ModelParams


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    path = os.environ.get("SPINORBIT_CACHE_DIR")
    return path if path else str(tmp_path_factory.mktemp("fit-cache"))


@pytest.fixture(scope="session")
def params():
    return ModelParams()


@pytest.fixture(scope="session")
def table(params):
    return params.hansen_table()


@pytest.fixture(scope="session")
def system(params, cache_dir):
    return build_system(params, cache_dir=cache_dir)


@pytest.fixture(scope="session")
def fast(system):
    return system.fast


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def known_capture(system):
    """I = 1 campaign from (θ, θ̇) = (0, 49), which ends in the 3/2 resonance.

    Shared by the campaign and acceptance tests; takes about two minutes.
    """
    from spinorbit.model import State
    from spinorbit.montecarlo import CampaignConfig, run_campaign

    return run_campaign(CampaignConfig(I=1), system, initial_states=[State(0.0, 49.0)])


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for the acceptance summary."""

    def emit(number: int, name: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} [{number:2d}] {name}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
