import warnings

import numpy as np
import pytest

from dynpot.gpd import CoefVector, PredictorPanel
from dynpot.likelihood import ExceedanceSeries


def random_instance(rng, T=500, p=3, ar=0.0, exceed=0.3):
    """Small random (beta, series, panel) triple with moderate parameters."""
    Z = rng.standard_normal((T, p))
    b1 = np.concatenate([[rng.uniform(-1.0, 0.5)], rng.uniform(-0.3, 0.3, p)])
    b2 = np.concatenate([[rng.uniform(-0.5, 0.5)], rng.uniform(-0.3, 0.3, p), [ar]])
    y = np.where(rng.random(T) < exceed, rng.exponential(1.0, T), 0.0)
    y[0] = max(y[0], 0.5)
    return CoefVector(b1, b2), ExceedanceSeries(y, np.zeros(T)), PredictorPanel(Z)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_solver_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*exceedances for.*")
        yield


# acceptance criteria report: one line per test marked ``criterion``
_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA.append((mark.args[0], rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
