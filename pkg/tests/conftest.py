import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ehwsn import system

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []

# small scenario shared by the simulator tests; trained once per session
SMALL = {
    "seed": 11,
    "dataset": {"n_windows_per_class": 15, "train_windows_per_class": 60},
    "training": {"epochs": 15, "recon_repeats": 2, "host_draws": 3},
}


@pytest.fixture(scope="session")
def small_cfg():
    return system.load_config(SMALL)


@pytest.fixture(scope="session")
def small_scenario(small_cfg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return system.prepare(small_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
