import numpy as np
import pytest

from kicksense.config import CALIBRATED_MEASUREMENT_NOISE_PSD, load_config, three_mode_config
from kicksense.control import design_lqg
from kicksense.lti import discretize
from kicksense.model import ModeParams, build_full_model

MODE1 = ModeParams(f=23.05e3, Q=110000, m_eff=4.52e-12, b_F=1e-9)


@pytest.fixture(scope="session")
def three_mode_model():
    return load_config(three_mode_config()).model


@pytest.fixture(scope="session")
def three_mode_gains(three_mode_model):
    return design_lqg(three_mode_model)


@pytest.fixture(scope="session")
def mode1_model():
    return build_full_model([MODE1], None, CALIBRATED_MEASUREMENT_NOISE_PSD)


@pytest.fixture(scope="session")
def mode1_gains(mode1_model):
    return design_lqg(mode1_model)


@pytest.fixture(scope="session")
def mode1_discrete(mode1_model):
    return discretize(mode1_model, 1e-6)


def random_stable(rng, n, margin=0.1):
    """Random Hurwitz matrix with spectral abscissa at most ``-margin``."""
    A = rng.standard_normal((n, n))
    shift = np.max(np.linalg.eigvals(A).real) + margin
    return A - shift * np.eye(n)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
