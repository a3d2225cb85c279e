"""Prints one pass/fail line per acceptance criterion at the end of the run."""

import re

_outcomes = {}


def pytest_runtest_logreport(report):
    match = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not match:
        return
    key = (int(match.group(1)), match.group(2))
    if report.failed:
        _outcomes[key] = "FAIL"
    elif report.when == "call":
        _outcomes.setdefault(key, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for (number, name), outcome in sorted(_outcomes.items()):
        terminalreporter.write_line(f"criterion {number:2d} {name.replace('_', ' '):40s} {outcome}")
