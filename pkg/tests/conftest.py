"""Collects acceptance-criterion outcomes and prints one line per criterion."""

from __future__ import annotations

import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.stash[_RESULTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    details = [str(v) for k, v in item.user_properties if k == "detail"]
    results = item.config.stash[_RESULTS]
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    if results.get(number, ("PASS",))[0] == "PASS" or status != "PASS":
        results[number] = (status, title, "; ".join(details))


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(results):
        status, title, detail = results[number]
        line = f"criterion {number:>2} {status}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
