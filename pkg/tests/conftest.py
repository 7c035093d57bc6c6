import time

import pytest

_results: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    t0 = time.perf_counter()
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        number, title = mark.args
        status = "FAIL" if outcome.excinfo is not None else "PASS"
        _results[number] = (title, status, time.perf_counter() - t0)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, status, secs = _results[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}  ({secs:.1f} s)")
