import re

import numpy as np
import pytest

from lpr_acr.bacl import Hyperparameters
from lpr_acr.experiment import Protocol, fit_models, simulate_period

# small but realistic: one hour of training traffic, quick training
FAST_HYPER = Hyperparameters(hidden=(16, 16), epochs=60, patience=15)
FAST = Protocol(train_duration=3600.0, test_duration=900.0, max_samples=1500, hyper=FAST_HYPER)


@pytest.fixture(scope="session")
def small_periods():
    """(train, test) periods at 50% matching."""
    train = simulate_period(11, 0.5, FAST.train_duration, "train", FAST)
    test = simulate_period(11, 0.5, FAST.test_duration, "test", FAST)
    return train, test


@pytest.fixture(scope="session")
def small_models(small_periods):
    train, _ = small_periods
    return {lane: r.model for lane, r in fit_models(train, FAST, 11).items()}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def emit(number, ok, detail):
        line = f"CRITERION {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(re.search(r"\d+", l).group())):
            terminalreporter.write_line(line)
