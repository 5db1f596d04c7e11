import pytest

CRITERIA: dict[int, str] = {}


@pytest.fixture
def report():
    """Record the one-line verdict of an acceptance criterion."""
    def _report(number: int, passed: bool, detail: str) -> None:
        CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        print(CRITERIA[number])
    return _report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
