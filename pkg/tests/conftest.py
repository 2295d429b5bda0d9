import gc

import jax
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import trumpet  # noqa: F401  (enables float64)
from trumpet.verify import random_model

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def rand_model():
    """Desk model with every parameter moved away from identity."""
    return random_model(0)


@pytest.fixture(scope="module", autouse=True)
def _drop_compiled():
    """Free XLA executables between modules; the full run otherwise outgrows 6 GB."""
    yield
    jax.clear_caches()
    gc.collect()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, passed, detail)`` records the summary line for criterion ``n``."""
    def record(n, passed, detail):
        ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[n])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
