import pytest

_verdicts = []


@pytest.fixture(scope="session")
def verdict():
    """Record one pass/fail line per acceptance criterion, printed after the run."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _verdicts.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance")
        for _, line in sorted(_verdicts):
            terminalreporter.write_line(line)
