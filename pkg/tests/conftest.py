import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the summary prints them in criterion order."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        status = "PASS" if passed else "FAIL"
        _CRITERIA[number] = f"[{status}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
