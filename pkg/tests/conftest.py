import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qpskdnn.dsp import design_lowpass, design_rrc
from qpskdnn.transmitter import FrameConfig

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FS = 2e6


@pytest.fixture(scope="session")
def rrc():
    return design_rrc(8, 0.35)


@pytest.fixture(scope="session")
def lpf():
    return design_lowpass(FS, 200e3, 50e3, 60)


@pytest.fixture(scope="session")
def frame():
    return FrameConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(n: int, passed: bool, detail: str) -> str:
    line = f"criterion {n} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
