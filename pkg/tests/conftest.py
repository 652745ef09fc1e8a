import pytest

_ACCEPTANCE_LINES: list[str] = []


def _criterion_key(line: str) -> int:
    return int(line.split()[2].rstrip(":").rstrip("abc"))


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, print it, then assert it."""

    def record(label: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {label}: {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    # echoed here as well so the verdicts survive output capture
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=_criterion_key):
            terminalreporter.write_line(line)
