"""Shared pytest hooks.

The acceptance tests register one line per headline criterion through the
``record`` fixture; echoing the collected lines in the terminal summary
makes the pass/fail ledger visible even when every test passes.
"""

import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    def _record(criterion, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
