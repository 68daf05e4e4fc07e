import pytest

from satlab.tensor import Rng

# criterion number -> (title, passed, detail); filled by tests marked ``criterion``
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    n, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    _CRITERIA[n] = (title, report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[n]
        line = f"criterion {n} [{'PASS' if passed else 'FAIL'}] {title}"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))


@pytest.fixture
def rng():
    return Rng(2024, stream=9)
