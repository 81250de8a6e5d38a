import numpy as np
import pytest

from ttt4rec.data import build_sequences, split_leave_one_out
from ttt4rec.synthetic import planted_pattern_log


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synthetic():
    """300 users over 200 items; cheap enough for CLI and determinism tests."""
    ds = build_sequences(planted_pattern_log(n_items=200, n_users=300, seed=7), 5, 20)
    return ds, split_leave_one_out(ds)


# --- acceptance reporting: one PASS/FAIL line per criterion -------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not (rep.when == "setup" and not rep.passed)):
        return
    n, title = mark.args
    status = "SKIP" if rep.skipped else "PASS" if rep.passed else "FAIL"
    detail = "; ".join(v for k, v in item.user_properties if k == "measured")
    item.config._criteria[n] = (status, title, detail)


def pytest_terminal_summary(terminalreporter, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(crit):
        status, title, detail = crit[n]
        line = f"[{status}] criterion {n}: {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
