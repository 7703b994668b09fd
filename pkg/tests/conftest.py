"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_OUTCOMES: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        passed = report.passed and not hasattr(report, "wasxfail")
        detail = ""
        if not passed:
            detail = str(report.longrepr).strip().splitlines()[-1][:160]
            if hasattr(report, "wasxfail"):
                detail = f"expected failure: {report.wasxfail}; {detail}"
        _OUTCOMES[n] = ("PASS" if passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        status, title, detail = _OUTCOMES[n]
        line = f"[{status}] criterion {n}: {title}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
