import pytest

_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line and assert on it."""

    def record(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        _LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
