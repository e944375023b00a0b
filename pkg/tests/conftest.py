import pytest

_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """Record a one-line verdict for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
