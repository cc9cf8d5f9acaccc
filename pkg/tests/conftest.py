import numpy as np
import pytest

from robustsae.model import Dataset, ModelParams
from robustsae.simulation import Scenario, generate_scenario

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def clean30():
    data, theta = generate_scenario(Scenario("I", m=30), 0, 123)
    return data


@pytest.fixture
def contaminated30():
    data, theta = generate_scenario(Scenario("II", m=30), 0, 7)
    return data


def random_dataset(rng, m=20, p=2, a=0.5):
    x = np.column_stack([np.ones(m), rng.uniform(size=(m, p - 1))])
    d = rng.uniform(0.2, 1.0, size=m)
    beta = rng.normal(size=p)
    y = x @ beta + rng.normal(scale=np.sqrt(a + d))
    return Dataset(y, x, d), ModelParams(beta, a)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
