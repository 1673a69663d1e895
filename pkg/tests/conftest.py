from dataclasses import replace

import pytest

from cpsdiag.simulator import TrialConfig, make_trial

# small enough to build in well under a second
SMALL_TRIAL = replace(
    TrialConfig(),
    nodes=(5, 5),
    train_len=2048,
    validation_len=2048,
    calibration_len=4096,
    test_len=1024,
)


@pytest.fixture(scope="session")
def small_trial():
    return make_trial(SMALL_TRIAL, seed=1)
