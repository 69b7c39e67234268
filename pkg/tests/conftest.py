import pytest

_RESULTS: list[str] = []


@pytest.fixture
def criterion():
    """record(name, ok, detail) adds a line to the acceptance report."""

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _RESULTS.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)
