import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ednmr.spincore import StaticField, load_donors
from ednmr.starkdrive import load_drive_models

settings.register_profile("ednmr", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ednmr")

# Working point used throughout: 250 mT in the device plane along [110].
B0 = 0.25
B0_DIRECTION = (1.0, 1.0, 0.0)


@pytest.fixture(scope="session")
def donors():
    return load_donors()


@pytest.fixture(scope="session")
def drive_models():
    return load_drive_models()[0]


@pytest.fixture(scope="session")
def operating_field():
    return float(load_drive_models()[1]["operating_field_v_per_m"])


@pytest.fixture(scope="session")
def field():
    return StaticField.along(B0, B0_DIRECTION)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
