"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end of the session."""

import pytest

_RESULTS = {}


@pytest.fixture
def record_criterion():
    def record(number, title, passed, detail):
        _RESULTS[number] = (title, bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, passed, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number} ({title}): {'PASS' if passed else 'FAIL'}; {detail}")
