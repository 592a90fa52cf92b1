import re

import pytest

_LINES = []


def record(criterion, ok, detail):
    """Store one acceptance result line and return ``ok``."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    _LINES.append(line)
    print(line)
    return ok


@pytest.fixture
def acceptance():
    return record


def _order(line):
    num, suffix = re.match(r"criterion (\d+)(\w*)", line).groups()
    return int(num), suffix


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=_order):
            terminalreporter.write_line(line)
