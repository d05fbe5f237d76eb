import pytest

# criterion number -> (passed, one-line summary); filled by test_acceptance
CRITERIA: dict = {}


def record(number: int, passed: bool, summary: str) -> None:
    CRITERIA[number] = (passed, summary)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, summary = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {summary}")


@pytest.fixture
def recorder():
    return record
