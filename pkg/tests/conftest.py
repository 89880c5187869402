import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and asserts it.

    ``ok=None`` records a criterion that is not testable at this scale.
    """
    def record(n: int, ok, detail: str):
        status = "N/A" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {n:>2}: {status}  {detail}"
        _CRITERIA[n] = line
        print(line)
        if ok is not None:
            assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
