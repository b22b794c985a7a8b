import pytest

ACCEPTANCE_LINES = []


def record_acceptance(number, passed, summary):
    line = f"[acceptance {number:>2}] {'PASS' if passed else 'FAIL'}  {summary}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


@pytest.fixture
def acceptance():
    return record_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
