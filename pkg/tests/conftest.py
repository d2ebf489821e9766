import pytest

# (criterion, verdict, detail) lines collected by the acceptance tests
ACCEPTANCE_LINES: list[tuple[str, str, str]] = []


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line right away and keep it for the closing summary."""

    def emit(criterion: str, ok: bool, detail: str, expected_fail: bool = False) -> bool:
        word = ("XFAIL" if not ok else "XPASS") if expected_fail else ("PASS" if ok else "FAIL")
        ACCEPTANCE_LINES.append((criterion, word, detail))
        with capsys.disabled():
            print(f"\n[acceptance] {word} {criterion}: {detail}")
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, word, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{word:5s} {criterion}: {detail}")
