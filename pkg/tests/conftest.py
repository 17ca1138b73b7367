import pytest

_LINES = []


@pytest.fixture
def report():
    """Record one pass/fail line; all lines are repeated in the terminal summary."""
    def emit(number: int, ok: bool, text: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {text}"
        print(line)
        _LINES.append(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
