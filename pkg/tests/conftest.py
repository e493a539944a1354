import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("kvq", deadline=None, max_examples=40)
settings.load_profile("kvq")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> list of (test name, passed, detail)
ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if report.failed and report.when != "call":
        detail = f"{report.when} error"
    ACCEPTANCE.setdefault(marker.args[0], []).append((item.name, report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        passed = all(ok for _, ok, _ in parts)
        detail = " | ".join(f"{name}: {d}" if d else name for name, ok, d in parts if d or not ok)
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
