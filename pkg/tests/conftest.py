"""Collects one verdict line per acceptance criterion and prints them at the end of the run."""

import pytest

VERDICTS = {}


@pytest.fixture
def verdict():
    def record(number: int, passed: bool, detail: str):
        VERDICTS[number] = (passed, detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        passed, detail = VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
