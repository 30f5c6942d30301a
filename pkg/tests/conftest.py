import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rqj.lindblad import QGridWarning
from rqj.operators import SystemParams

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def std_params():
    return SystemParams.standard()


@pytest.fixture
def small():
    """Weakly driven, small-cutoff parameters for fast dense checks."""
    return SystemParams(g=2.0, kappa=1.5, gamma_perp=0.7, E=1.2, eta=0.8, n_max=8, frame="LAB")


@pytest.fixture(autouse=True)
def _quiet_q_boundary():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", QGridWarning)
        yield


def random_density(dim, rng, rank=None):
    rank = dim if rank is None else rank
    z = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = z @ z.conj().T
    return rho / np.trace(rho).real


def random_pure(dim, rng):
    return random_density(dim, rng, rank=1)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
