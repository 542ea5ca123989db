"""Collects one pass/fail line per acceptance criterion and prints them at the end."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when != "call" and not rep.failed:
        return
    n, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    prev = _RESULTS.get(n, (True, title, ""))
    _RESULTS[n] = (prev[0] and rep.passed, title, detail or prev[2])


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, title, detail = _RESULTS[n]
        line = f"{'PASS' if ok else 'FAIL'}  [{n:2d}] {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
