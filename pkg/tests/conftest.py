import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from palmerlin import IntegratorConfig, example4, linear_diag

settings.register_profile("palmer", max_examples=15, deadline=None, derandomize=True)
settings.load_profile("palmer")

ORACLE_PATH = Path(__file__).parent / "oracles" / "frozen.json"


@pytest.fixture(scope="session")
def frozen():
    return json.loads(ORACLE_PATH.read_text())


@pytest.fixture(scope="session")
def ex4():
    return example4(1.0, 0.2)


@pytest.fixture(scope="session")
def lin2():
    return linear_diag([-1.0, -2.0])


@pytest.fixture(scope="session")
def tight():
    return IntegratorConfig(rtol=1e-12, atol=1e-14)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
