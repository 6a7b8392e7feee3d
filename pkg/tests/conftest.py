import pytest

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(k, ok, detail)`` records and prints one pass/fail line, then asserts."""

    def report(k: int, ok: bool, detail: str):
        line = f"CRITERION {k:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES[k] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
