import pytest

CRITERIA_LINES: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record and print a one-line PASS/FAIL verdict for an acceptance criterion."""

    def _verdict(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        CRITERIA_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return _verdict


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES):
            terminalreporter.write_line(line)
