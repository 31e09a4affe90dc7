import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_small_series():
    # MPPCA on short series warns by design; tests that care use pytest.warns
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="MPPCA on")
        yield


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``record(number, passed, detail)`` for the acceptance summary."""
    store = request.config.stash.setdefault(_CRITERIA, {})

    def record(number, passed, detail):
        store[number] = (bool(passed), detail)
        print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_CRITERIA, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        passed, detail = store[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
