import pytest

ACCEPTANCE_LINES = {}


@pytest.fixture
def record_criterion():
    """Store the one-line verdict of an acceptance criterion for the terminal summary."""

    def record(number, title, passed, detail):
        ACCEPTANCE_LINES[number] = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        print(ACCEPTANCE_LINES[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
