import numpy as np
import pytest

from expinterp.dataio import SynthConfig, synth_scene
from expinterp.imgcore import ExposureImage


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def clean_scene():
    return synth_scene(SynthConfig(seed=7, width=96, height=80, noise=0.0))


@pytest.fixture(scope="session")
def noisy_scene():
    return synth_scene(SynthConfig(seed=7, width=96, height=80, noise=1.0))


def make_exposure(data, time=1.0):
    return ExposureImage(np.asarray(data, dtype=np.uint8), time)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects one summary line per acceptance criterion for the terminal report."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])
    return lines.append


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
