import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bidyadic.haar import StepFunction
from bidyadic.lattice import LatticeParams

settings.register_profile(
    "bidyadic", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "bidyadic"))

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}
ACCEPTANCE_TITLES = {
    1: "Haar identities",
    2: "grid census",
    3: "weights",
    4: "oscillation",
    5: "model operators",
    6: "representation exactness",
    7: "compactness probes",
    8: "determinism",
}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k, title in ACCEPTANCE_TITLES.items():
        if k in ACCEPTANCE:
            ok, detail = ACCEPTANCE[k]
            terminalreporter.write_line(f"criterion {k} {title}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {k} {title}: NOT RUN")


@pytest.fixture
def small():
    """Torus with 4 cells per coordinate."""
    return LatticeParams(M=1, L=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_step(params, rng, axes=(1, 2), dyadic=False):
    shape = tuple(params.cells(a) for a in axes)
    vals = rng.standard_normal(shape)
    if dyadic:
        vals = np.round(vals * 64) / 64
    return StepFunction(params, axes, vals)
