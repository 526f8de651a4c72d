import pytest

VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one acceptance line; the test still asserts on its own."""

    def record(k: int, ok: bool, detail: str) -> None:
        line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS[k] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[k])
