import pytest

_RESULTS = {}


@pytest.fixture
def criterion(request):
    """Record a one-line verdict for an acceptance criterion.

    Usage: ``criterion(n, title, ok, detail)``; the line is printed right
    away and repeated in the terminal summary.
    """

    def record(number, title, ok, detail=""):
        line = f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'}" + (f" - {detail}" if detail else "")
        _RESULTS[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[number])
