import numpy as np
import pytest

from helpers import ACCEPTANCE_LINES
from opensetids import OpenSetDetector, featurize
from opensetids.synth import default_specs, generate


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def three_class_flows():
    return generate(default_specs()[:3], 60, seed=5)


@pytest.fixture(scope="session")
def small_detector(three_class_flows):
    flows = three_class_flows
    det = OpenSetDetector(epochs=4, vae_epochs=4, random_state=3)
    det.fit(featurize(flows), [f.label for f in flows])
    return det


@pytest.fixture(scope="session")
def unknown_flows():
    return generate([default_specs()[3]], 40, seed=6)

